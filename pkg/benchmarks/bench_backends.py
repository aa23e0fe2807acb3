#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Two sections:

* per-kernel: times every kernel in both implementation modules directly,
  on desk-scale shapes. This is the measurement behind the hybrid lane
  (compiled fused reductions, numpy elementwise transcendentals).
* end-to-end: times a pre-training step under each selected backend
  (subprocesses, since the lane binds at import).

Usage: python benchmarks/bench_backends.py [--steps 30] [--repeat 200]
"""

import argparse
import json
import os
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np


def _time(fn, repeat):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - start) / repeat


def _kernel_cases(rng):
    # desk-scale shapes: batch 8 x 26 text positions, dim 32, vocab 256
    x = rng.normal(size=(208, 32)).astype(np.float32)
    gamma = np.ones(32, dtype=np.float32)
    beta = np.zeros(32, dtype=np.float32)
    dy = rng.normal(size=x.shape).astype(np.float32)
    scores = rng.normal(size=(8 * 4 * 26, 26)).astype(np.float32)
    dscores = rng.normal(size=scores.shape).astype(np.float32)
    ffn = rng.normal(size=(208, 128)).astype(np.float32)
    dffn = rng.normal(size=ffn.shape).astype(np.float32)
    logits = rng.normal(size=(64, 256)).astype(np.float32)
    targets = rng.integers(0, 256, size=64)

    def cases(impl):
        y, mu, rstd = impl.layernorm_fwd(x, gamma, beta, 1e-5)
        probs = impl.softmax_fwd(scores)
        p = rng.normal(size=(256, 32)).astype(np.float32)
        g = rng.normal(size=(256, 32)).astype(np.float32)
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        return {
            "layernorm_fwd": lambda: impl.layernorm_fwd(x, gamma, beta, 1e-5),
            "layernorm_bwd": lambda: impl.layernorm_bwd(dy, x, gamma, mu, rstd),
            "softmax_fwd": lambda: impl.softmax_fwd(scores),
            "softmax_bwd": lambda: impl.softmax_bwd(dscores, probs),
            "gelu_fwd": lambda: impl.gelu_fwd(ffn),
            "gelu_bwd": lambda: impl.gelu_bwd(dffn, ffn),
            "ce_hard_fwd": lambda: impl.ce_hard_fwd(logits, targets),
            "adamw_step": lambda: impl.adamw_step(p, g, m, v, 3, 1e-3, 0.9, 0.999, 1e-8, 0.02),
        }

    return cases


def bench_kernels(repeat):
    from fashionsap.core import _kernels_py

    try:
        from fashionsap.core import _ckernels
    except ImportError:
        _ckernels = None
        print("compiled kernels not built; showing numpy lane only", file=sys.stderr)

    cases = _kernel_cases(np.random.default_rng(0))
    py = {k: _time(fn, repeat) for k, fn in cases(_kernels_py).items()}
    cy = {k: _time(fn, repeat) for k, fn in cases(_ckernels).items()} if _ckernels else {}

    print(f"{'kernel':<16} {'numpy':>12} {'cython':>12} {'cython gain':>12}")
    for key, py_t in py.items():
        if cy:
            c_t = cy[key]
            print(f"{key:<16} {py_t * 1e6:>10.1f}us {c_t * 1e6:>10.1f}us {py_t / c_t:>11.2f}x")
        else:
            print(f"{key:<16} {py_t * 1e6:>10.1f}us {'-':>12} {'-':>12}")


def bench_end_to_end_lane(steps):
    from fashionsap.core import kernels
    from fashionsap.data_io import SynthSpec, generate_synthetic, load_corpus
    from fashionsap.model.config import ModelConfig, TrainConfig
    from fashionsap.pretrain import Pretrainer
    from fashionsap.textpipe import LexicalResource

    with tempfile.TemporaryDirectory() as tmp:
        generate_synthetic(SynthSpec(n_items=64, seed=1), tmp)
        records = load_corpus(Path(tmp) / "corpus.jsonl")
        lex = LexicalResource.load(Path(tmp) / "lexicon.json")
        trainer = Pretrainer(
            ModelConfig(), TrainConfig(steps=steps, batch_size=8, seed=0, checkpoint_every=0),
            records, tmp, lex=lex,
        )
        trainer.step_once()
        start = time.perf_counter()
        for _ in range(steps):
            trainer.step_once()
        per_step = (time.perf_counter() - start) / steps
    print(json.dumps({"backend": kernels.BACKEND, "pretrain_step": per_step}))


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=30)
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--lane", choices=["py", "auto"], help=argparse.SUPPRESS)
    args = parser.parse_args()

    if args.lane:
        bench_end_to_end_lane(args.steps)
        return

    bench_kernels(args.repeat)

    print()
    rows = {}
    for lane in ("py", "auto"):
        env = dict(os.environ, FASHIONSAP_BACKEND=lane)
        proc = subprocess.run(
            [sys.executable, __file__, "--lane", lane, "--steps", str(args.steps)],
            capture_output=True, text=True, env=env,
        )
        if proc.returncode == 0:
            rows[lane] = json.loads(proc.stdout.strip().splitlines()[-1])
    if "py" in rows and "auto" in rows:
        py_t = rows["py"]["pretrain_step"]
        sel_t = rows["auto"]["pretrain_step"]
        print(f"pretrain_step    numpy lane {py_t * 1e3:8.1f}ms   "
              f"{rows['auto']['backend']} lane {sel_t * 1e3:8.1f}ms   gain {py_t / sel_t:5.2f}x")
    elif "py" in rows:
        print(f"pretrain_step    numpy lane {rows['py']['pretrain_step'] * 1e3:8.1f}ms")


if __name__ == "__main__":
    main()

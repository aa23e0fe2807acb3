"""Kernel backend selection.

The differentiable substrate routes its hot inner loops (layer norm, softmax,
gelu, cross-entropy, optimizer update) through this module. Two lanes exist:

* ``fashionsap.core._ckernels`` -- compiled extension (built by
  ``python setup.py build_ext --inplace`` or a normal pip install),
* ``fashionsap.core._kernels_py`` -- numpy fallback, always available.

``FASHIONSAP_BACKEND`` picks the lane at import: ``auto`` (default, compiled
when importable), ``c`` (compiled, error if missing) or ``py``.

The compiled lane takes over the fused multi-pass reductions, where a single
C loop beats several numpy passes (layer norm forward/backward, softmax
backward); pure elementwise transcendentals (exp, tanh) stay on numpy's
vectorized implementations in both lanes, which profiling shows are faster
than scalar libm loops (see benchmarks/bench_backends.py). Results agree
across lanes up to floating-point summation order; determinism guarantees
hold within a single lane.
"""

import os

from . import _kernels_py

_COMPILED_OVERRIDES = ("layernorm_fwd", "layernorm_bwd", "softmax_bwd")

_choice = os.environ.get("FASHIONSAP_BACKEND", "auto").lower()
if _choice not in ("auto", "c", "py"):
    raise ValueError(f"FASHIONSAP_BACKEND must be auto, c or py, got {_choice!r}")

_compiled = None
if _choice != "py":
    try:
        from . import _ckernels as _compiled  # type: ignore[no-redef]
    except ImportError:
        if _choice == "c":
            raise ImportError(
                "FASHIONSAP_BACKEND=c but the compiled kernel extension is not "
                "built; run `python setup.py build_ext --inplace`"
            ) from None

BACKEND = "cython" if _compiled is not None else "python"


def _pick(name: str):
    if _compiled is not None and name in _COMPILED_OVERRIDES:
        return getattr(_compiled, name)
    return getattr(_kernels_py, name)


layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
gelu_fwd = _pick("gelu_fwd")
gelu_bwd = _pick("gelu_bwd")
ce_hard_fwd = _pick("ce_hard_fwd")
ce_hard_bwd = _pick("ce_hard_bwd")
ce_soft_fwd = _pick("ce_soft_fwd")
ce_soft_bwd = _pick("ce_soft_bwd")
adamw_step = _pick("adamw_step")

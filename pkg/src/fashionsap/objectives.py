"""The five pre-training losses and their unweighted sum.

All losses are graph-aware: they take autograd tensors and return scalar
tensors, so the training loop can backpropagate through any subset. The
report type carries the per-part values for logging; its total is always
the exact Python-float sum of the parts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import autograd as ag
from .core.autograd import Tensor
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    TrainingDivergenceError,
)

log = logging.getLogger("fashionsap.objectives")

_UNIT_TOL = 1e-3


def _check_unit_rows(x: np.ndarray, what: str) -> None:
    norms = np.sqrt((x * x).sum(axis=-1))
    if norms.size and np.abs(norms - 1.0).max() > _UNIT_TOL:
        raise InvalidInputError(f"{what} rows must be unit-normalized")


def fsis_loss(v_img: Tensor, v_symbol: Tensor, form: str = "per_sample") -> Tensor:
    """Cosine-distance pull between adapted image and symbol features.

    `per_sample` (default) averages 1 - (cos+1)/2 over the batch, which is
    bounded in [0, 1]. `as_printed` applies the batch mean outside the
    bracket instead; the two coincide at batch size 1.
    """
    _check_unit_rows(v_img.data, "adapted image")
    _check_unit_rows(v_symbol.data, "adapted symbol")
    b = v_img.shape[0]
    cos = ag.sum_(ag.mul(v_img, v_symbol), axis=-1)  # (B,)
    half = ag.mul(ag.add(cos, 1.0), 0.5)
    if form == "per_sample":
        return ag.mean(ag.add(ag.mul(half, -1.0), 1.0))
    if form == "as_printed":
        return ag.mul(ag.add(ag.mul(ag.sum_(half), -1.0), 1.0), 1.0 / b)
    raise InvalidConfigError(f"fsis form must be per_sample|as_printed, got {form!r}")


def ptp_loss(logits: Tensor | None, targets) -> Tensor:
    """Mean token cross-entropy over all supervised (blanked + masked) rows."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits is None or targets.size == 0:
        log.warning("no supervised prompt/mask positions in this batch")
        return Tensor(np.asarray(0.0))
    if logits.shape[0] != targets.shape[0]:
        raise InvalidInputError("one target id required per supervised row")
    return ag.cross_entropy(logits, targets)


def trp_loss(logits: Tensor, labels) -> Tensor:
    """Mean two-way cross-entropy over replaced/original labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return Tensor(np.asarray(0.0))
    return ag.cross_entropy(logits, labels)


def its_similarities(
    q_text: Tensor,
    q_image: Tensor,
    cand_text: np.ndarray,
    cand_image: np.ndarray,
) -> tuple[Tensor, Tensor]:
    """Unit-feature dot products between queries and candidate features.

    Queries are the projected online features; candidates are the momentum
    batch concatenated with the queue snapshot (constants in the graph).
    Returns (sim_t2i, sim_i2t), each of shape (B, M).
    """
    if cand_text.shape[0] == 0 or cand_image.shape[0] == 0:
        raise InvalidStateError("empty candidate set for similarity computation")
    _check_unit_rows(q_text.data, "text query")
    _check_unit_rows(q_image.data, "image query")
    _check_unit_rows(cand_text, "text candidate")
    _check_unit_rows(cand_image, "image candidate")
    sim_t2i = ag.matmul(q_text, cand_image.T.astype(q_text.data.dtype))
    sim_i2t = ag.matmul(q_image, cand_text.T.astype(q_image.data.dtype))
    return sim_t2i, sim_i2t


def its_distributions(sims: Tensor, tau) -> Tensor:
    """Row-wise softmax of sims/tau (temperature applied to every exponent)."""
    tau_value = float(np.asarray(tau.data).reshape(-1)[0]) if isinstance(tau, Tensor) else float(tau)
    if tau_value <= 0:
        raise InvalidConfigError(f"temperature must be > 0, got {tau_value}")
    return ag.softmax(ag.div(sims, tau))


def soft_targets(
    positives, momentum_dist: np.ndarray | None, alpha: float, n_candidates: int | None = None
) -> np.ndarray:
    """(1 - alpha) * one-hot(positive) + alpha * momentum distribution."""
    positives = np.asarray(positives, dtype=np.int64)
    if momentum_dist is None:
        if alpha != 0.0:
            raise InvalidInputError("alpha > 0 requires a momentum distribution")
        m = None
    else:
        m = np.asarray(momentum_dist)
    b = positives.shape[0]
    if m is not None:
        n_cand = m.shape[1]
    elif n_candidates is not None:
        n_cand = n_candidates
    else:
        n_cand = int(positives.max()) + 1
    if positives.min() < 0 or positives.max() >= n_cand:
        raise InvalidInputError("positive index out of candidate range")
    one_hot = np.zeros((b, n_cand))
    one_hot[np.arange(b), positives] = 1.0
    y = one_hot if m is None else (1.0 - alpha) * one_hot + alpha * m
    if np.abs(y.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvalidInputError("soft target rows must sum to 1")
    return y


def its_loss(
    g_i2t: Tensor,
    g_t2i: Tensor,
    positives,
    momentum_i2t: np.ndarray | None = None,
    momentum_t2i: np.ndarray | None = None,
    alpha: float = 0.0,
) -> Tensor:
    """Soft-target cross-entropy over the two retrieval directions, averaged.

    `positives` gives the matching candidate index per query (same for both
    directions in the standard batch layout).
    """
    positives = np.asarray(positives, dtype=np.int64)
    if positives.max(initial=-1) >= g_i2t.shape[1] or positives.min(initial=0) < 0:
        raise InvalidInputError("positive index out of range")
    y_i2t = soft_targets(positives, momentum_i2t, alpha, n_candidates=g_i2t.shape[1])
    y_t2i = soft_targets(positives, momentum_t2i, alpha, n_candidates=g_t2i.shape[1])

    def xent(g: Tensor, y: np.ndarray) -> Tensor:
        picked = ag.mul(ag.log(g), y.astype(g.data.dtype))
        return ag.mul(ag.mean(ag.sum_(picked, axis=1)), -1.0)

    return ag.mul(ag.add(xent(g_i2t, y_i2t), xent(g_t2i, y_t2i)), 0.5)


def itm_loss(logits: Tensor, labels) -> Tensor:
    """Mean two-way cross-entropy over matched/mismatched pair labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[0] != labels.shape[0]:
        raise InvalidInputError("one label required per pair")
    return ag.cross_entropy(logits, labels)


@dataclass
class LossReport:
    """Per-step loss values; total is exactly the sum of the parts."""

    fsis: float
    ptp: float
    trp: float
    its: float
    itm: float
    total: float

    def to_json_line(self, step: int) -> str:
        return json.dumps(
            {"step": step, "fsis": self.fsis, "ptp": self.ptp, "trp": self.trp,
             "its": self.its, "itm": self.itm, "total": self.total}
        )


def total_loss(fsis, ptp, trp, its, itm) -> LossReport:
    """Combine the five parts into a report, rejecting non-finite values."""
    parts = {"fsis": fsis, "ptp": ptp, "trp": trp, "its": its, "itm": itm}
    values: dict[str, float] = {}
    for name, part in parts.items():
        value = float(part.data) if isinstance(part, Tensor) else float(part)
        if not math.isfinite(value):
            raise TrainingDivergenceError(name, value)
        values[name] = value
    total = values["fsis"] + values["ptp"] + values["trp"] + values["its"] + values["itm"]
    return LossReport(total=total, **values)


def sum_parts(parts: list[Tensor]) -> Tensor:
    """Graph-aware unweighted sum used as the backward target."""
    out = parts[0]
    for p in parts[1:]:
        out = ag.add(out, p)
    return out

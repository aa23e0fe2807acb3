"""Decoupled-weight-decay adaptive-moment optimizer."""

from __future__ import annotations

import numpy as np

from . import kernels
from .nn import ParameterStore


class AdamW:
    """AdamW over a ParameterStore.

    Weight decay is skipped for parameters of rank < 2 (biases, layer-norm
    scales, scalars), the usual transformer convention.
    """

    def __init__(
        self,
        store: ParameterStore,
        lr: float,
        weight_decay: float = 0.02,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.store.items():
            if p.grad is None:
                continue
            wd = self.weight_decay if p.data.ndim >= 2 else 0.0
            kernels.adamw_step(
                p.data, p.grad, self.m[name], self.v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps, wd,
            )

    def zero_grad(self) -> None:
        for _, p in self.store.items():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for n in self.store.names():
            out[f"opt.m.{n}"] = self.m[n]
            out[f"opt.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for n in self.store.names():
            self.m[n] = arrays[f"opt.m.{n}"].astype(self.m[n].dtype)
            self.v[n] = arrays[f"opt.v.{n}"].astype(self.v[n].dtype)

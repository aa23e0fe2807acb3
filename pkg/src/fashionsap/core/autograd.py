"""Reverse-mode automatic differentiation over numpy arrays.

A small dynamic-graph engine: every op returns a Tensor that remembers its
parents and a backward closure. Hot per-element kernels (layer norm, softmax,
gelu, cross-entropy) are routed through fashionsap.core.kernels so the
compiled lane can take over; everything matrix-shaped stays on numpy/BLAS in
both lanes.

Float32 and float64 graphs are both supported; the dtype of the inputs is
preserved throughout (scalar constants never upcast).
"""

from __future__ import annotations

import numpy as np

from . import kernels

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (e.g. momentum encoders)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited = {id(self)}
        stack: list[tuple[Tensor, object]] = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            advanced = False
            for p in it:
                if id(p) not in visited:
                    visited.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                topo.append(node)
                stack.pop()
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


class Parameter(Tensor):
    """A leaf tensor updated by the optimizer."""

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a binary op's operands; constants adopt the tensor's dtype.

    Keeps float32 graphs float32: a bare Python/numpy constant would
    otherwise upcast the result to float64.
    """
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    return Tensor(np.asarray(a, dtype=b.data.dtype)), b


def _record(out_data, parents, backward_fn) -> Tensor:
    out = Tensor(out_data)
    live = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _record(out_data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _record(out_data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(out_data, (a, b), backward)


def pow_const(a, exponent: float):
    a = as_tensor(a)
    e = float(exponent)
    out_data = a.data**e

    def backward(g):
        a._accum(g * e * a.data ** (e - 1.0))

    return _record(out_data, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return _record(out_data, (a, b), backward)


# -- shape ops ------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old = a.data.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accum(g.reshape(old))

    return _record(out_data, (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    out_data = a.data.transpose(axes)

    def backward(g):
        a._accum(g.transpose(inv))

    return _record(out_data, (a,), backward)


def swap_last(a):
    """Swap the last two axes (matmul transpose)."""
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, -1, -2)

    def backward(g):
        a._accum(np.swapaxes(g, -1, -2))

    return _record(out_data, (a,), backward)


def take(a, idx):
    """Numpy indexing (slices or integer arrays); scatter-add on backward."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _record(out_data, (a,), backward)


def concat(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _record(out_data, tuple(tensors), backward)


# -- reductions -----------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _record(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise ------------------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data)

    return _record(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        a._accum(g / a.data)

    return _record(out_data, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * 0.5 / out_data)

    return _record(out_data, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        a._accum(g * (1.0 - out_data * out_data))

    return _record(out_data, (a,), backward)


def gelu(a):
    a = as_tensor(a)
    out_data = kernels.gelu_fwd(np.ascontiguousarray(a.data))

    def backward(g):
        a._accum(kernels.gelu_bwd(np.ascontiguousarray(g), np.ascontiguousarray(a.data)))

    return _record(out_data, (a,), backward)


# -- fused row kernels ----------------------------------------------------


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a):
    """Softmax over the last axis."""
    a = as_tensor(a)
    shape = a.data.shape
    y = kernels.softmax_fwd(_rows(a.data))
    out_data = y.reshape(shape)

    def backward(g):
        dx = kernels.softmax_bwd(_rows(g), y)
        a._accum(dx.reshape(shape))

    return _record(out_data, (a,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Layer norm over the last axis with learned scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    shape = x.data.shape
    xr = _rows(x.data)
    y, mu, rstd = kernels.layernorm_fwd(xr, gamma.data, beta.data, eps)
    out_data = y.reshape(shape)

    def backward(g):
        dx, dgamma, dbeta = kernels.layernorm_bwd(_rows(g), xr, gamma.data, mu, rstd)
        if x.requires_grad:
            x._accum(dx.reshape(shape))
        if gamma.requires_grad:
            gamma._accum(dgamma)
        if beta.requires_grad:
            beta._accum(dbeta)

    return _record(out_data, (x, gamma, beta), backward)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy of 2-D logits against integer targets."""
    logits = as_tensor(logits)
    t = np.ascontiguousarray(np.asarray(targets, dtype=np.int64))
    losses, probs = kernels.ce_hard_fwd(np.ascontiguousarray(logits.data), t)
    n = logits.data.shape[0]
    out_data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward(g):
        dloss = np.full(n, float(g) / n, dtype=logits.data.dtype)
        logits._accum(kernels.ce_hard_bwd(dloss, probs, t))

    return _record(out_data, (logits,), backward)


def cross_entropy_soft(logits, target_probs):
    """Mean cross-entropy of 2-D logits against full target distributions."""
    logits = as_tensor(logits)
    y = np.ascontiguousarray(np.asarray(target_probs, dtype=logits.data.dtype))
    losses, probs = kernels.ce_soft_fwd(np.ascontiguousarray(logits.data), y)
    n = logits.data.shape[0]
    out_data = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward(g):
        dloss = np.full(n, float(g) / n, dtype=logits.data.dtype)
        logits._accum(kernels.ce_soft_bwd(dloss, probs, y))

    return _record(out_data, (logits,), backward)


def l2_normalize(x, eps: float = 1e-12):
    """Scale rows (last axis) to unit length; eps keeps the zero vector finite."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    s = n + eps
    out_data = x.data / s

    def backward(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        safe_n = np.where(n == 0.0, 1.0, n)
        x._accum(g / s - x.data * (dot / (safe_n * s * s)))

    return _record(out_data, (x,), backward)

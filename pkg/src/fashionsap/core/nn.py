"""Module/parameter containers and the transformer building blocks."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError, InvalidStateError
from . import autograd as ag
from .autograd import Parameter, Tensor

ATTENTION_MASK_BIAS = -1e9


def trunc_normal(shape, rng: np.random.Generator, std: float = 0.02, dtype=np.float32):
    """Truncated normal init: resample draws outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Module:
    """Minimal parameter container with insertion-ordered recursion."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            self._modules[str(i)] = m

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ParameterStore:
    """Ordered name -> Parameter view of a module tree.

    Supports flat iteration for the optimizer and value-level deep copy for
    the momentum mirror.
    """

    def __init__(self, named: dict[str, Parameter]):
        self._named = dict(named)

    @classmethod
    def of(cls, module: Module) -> "ParameterStore":
        return cls(dict(module.named_parameters()))

    def names(self):
        return list(self._named.keys())

    def items(self):
        return self._named.items()

    def __len__(self):
        return len(self._named)

    def __getitem__(self, name: str) -> Parameter:
        return self._named[name]

    def __contains__(self, name):
        return name in self._named

    def deep_copy(self) -> "ParameterStore":
        copied = {n: Parameter(p.data.copy()) for n, p in self._named.items()}
        for p in copied.values():
            p.requires_grad = False
        return ParameterStore(copied)

    def load_values(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._named if n not in values]
        extra = [n for n in values if n not in self._named]
        if strict and (missing or extra):
            raise InvalidStateError(f"parameter name mismatch: missing={missing[:5]} extra={extra[:5]}")
        for n, p in self._named.items():
            if n not in values:
                continue
            arr = values[n]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise InvalidStateError(f"shape mismatch for {n}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


class Linear(Module):
    """Dense layer with fan-in-scaled truncated-normal weights.

    A fixed small std (the large-model convention) breaks down at desk-scale
    widths: sublayer outputs shrink far below the residual stream and every
    layer norm then amplifies backward signals, unbalancing losses that pass
    through different stack depths. Scaling by 1/sqrt(fan_in) keeps
    activations and gradients O(1) at any width.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        super().__init__()
        std = 1.0 / float(np.sqrt(d_in))
        self.weight = Parameter(trunc_normal((d_out, d_in), rng, std=std, dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, ag.swap_last(self.weight))
        if self.bias is not None:
            y = ag.add(y, self.bias)
        return y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.table = Parameter(trunc_normal((n, d), rng, dtype=dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.data.shape[0]):
            raise InvalidInputError(
                f"id out of range for embedding of size {self.table.data.shape[0]}"
            )
        return ag.take(self.table, ids)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(d, dtype=dtype))
        self.beta = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, self.eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ag.transpose(ag.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def mask_bias(mask: np.ndarray, dtype) -> np.ndarray:
    """Additive attention bias (B, 1, 1, t): 0 on real keys, -1e9 on padding."""
    m = np.asarray(mask)
    return ((1.0 - m) * ATTENTION_MASK_BIAS).astype(dtype)[:, None, None, :]


class SelfAttention(Module):
    """Standard multi-head self-attention with output projection."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if d % heads != 0:
            raise InvalidInputError(f"dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / float(np.sqrt(d // heads))
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(d, d, rng, dtype=dtype)
        self.wv = Linear(d, d, rng, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        q = _split_heads(self.wq(x), self.heads)
        k = _split_heads(self.wk(x), self.heads)
        v = _split_heads(self.wv(x), self.heads)
        scores = ag.mul(ag.matmul(q, ag.swap_last(k)), self.scale)
        if bias is not None:
            scores = ag.add(scores, bias)
        probs = ag.softmax(scores)
        return self.wo(_merge_heads(ag.matmul(probs, v)))


class CrossAttention(Module):
    """Text-queries-image attention: one projection per role, heads concatenated.

    No output projection, so with a single head the layer computes exactly
    softmax((Wq T)(Wk I)^T / sqrt(d)) (Wv I). The most recent attention
    probabilities are kept on `last_probs` for attention-map extraction.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if d % heads != 0:
            raise InvalidInputError(f"dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / float(np.sqrt(d // heads))
        self.wq = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wk = Linear(d, d, rng, bias=False, dtype=dtype)
        self.wv = Linear(d, d, rng, bias=False, dtype=dtype)
        self.last_probs: Tensor | None = None

    def __call__(self, text: Tensor, image: Tensor) -> Tensor:
        if text.shape[-1] != image.shape[-1]:
            raise InvalidInputError(
                f"text dim {text.shape[-1]} != image dim {image.shape[-1]}"
            )
        q = _split_heads(self.wq(text), self.heads)
        k = _split_heads(self.wk(image), self.heads)
        v = _split_heads(self.wv(image), self.heads)
        scores = ag.mul(ag.matmul(q, ag.swap_last(k)), self.scale)
        probs = ag.softmax(scores)
        self.last_probs = probs
        return _merge_heads(ag.matmul(probs, v))


class FeedForward(Module):
    def __init__(self, d: int, rng: np.random.Generator, mult: int = 4, dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(d, mult * d, rng, dtype=dtype)
        self.fc2 = Linear(mult * d, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm transformer encoder block (attention, then feed-forward).

    The pre-norm arrangement keeps the residual stream additive, which lets
    the global/summary positions accumulate content from step one; the
    owning encoder applies a final LayerNorm after its stack.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.attn = SelfAttention(d, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.ffn = FeedForward(d, rng, dtype=dtype)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = ag.add(x, self.attn(self.ln1(x), bias))
        return ag.add(x, self.ffn(self.ln2(x)))


class FusionLayer(Module):
    """Fusion block: text self-attention, cross-attention into the image, feed-forward."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(d, dtype=dtype)
        self.self_attn = SelfAttention(d, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype=dtype)
        self.cross_attn = CrossAttention(d, heads, rng, dtype=dtype)
        self.ln3 = LayerNorm(d, dtype=dtype)
        self.ffn = FeedForward(d, rng, dtype=dtype)

    def __call__(self, x: Tensor, image: Tensor, bias: np.ndarray | None = None) -> Tensor:
        x = ag.add(x, self.self_attn(self.ln1(x), bias))
        x = ag.add(x, self.cross_attn(self.ln2(x), image))
        return ag.add(x, self.ffn(self.ln3(x)))

"""Text encoder, patch-based image encoder and the cross-attention fusion stack."""

from __future__ import annotations

import numpy as np

from ..core import autograd as ag
from ..core.nn import (
    Embedding,
    EncoderLayer,
    FusionLayer,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    mask_bias,
    trunc_normal,
)
from ..errors import InvalidInputError
from .config import ModelConfig


class TextEncoder(Module):
    """Token + position embedding followed by a self-attention stack.

    Sequences arrive with [CLS] at position 0; during pre-training position 1
    carries the fashion-symbol token, whose representation is learned through
    the shared token embedding table.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = Embedding(cfg.vocab_size, cfg.d_e, rng, dtype=dtype)
        self.pos_emb = Embedding(cfg.max_text_len, cfg.d_e, rng, dtype=dtype)
        self.proj = Linear(cfg.d_e, cfg.d, rng, dtype=dtype) if cfg.d_e != cfg.d else None
        self.layers = ModuleList(
            EncoderLayer(cfg.d, cfg.heads, rng, dtype=dtype) for _ in range(cfg.text_layers)
        )
        self.final_ln = LayerNorm(cfg.d, dtype=dtype)
        self.dtype = dtype

    def embed(self, ids: np.ndarray) -> ag.Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        t = ids.shape[1]
        if t > self.cfg.max_text_len:
            raise InvalidInputError(f"sequence length {t} exceeds max_text_len {self.cfg.max_text_len}")
        tok = self.tok_emb(ids)
        pos = self.pos_emb(np.arange(t))
        return ag.add(tok, pos)

    def encode(self, embedded: ag.Tensor, mask: np.ndarray) -> ag.Tensor:
        mask = np.asarray(mask)
        if mask.ndim == 1:
            mask = mask[None, :]
        if mask.shape != embedded.shape[:2]:
            raise InvalidInputError(f"mask shape {mask.shape} does not match {embedded.shape[:2]}")
        if (mask.sum(axis=1) == 0).any():
            raise InvalidInputError("attention mask is all-zero for some sequence")
        bias = mask_bias(mask, self.dtype)
        h = self.proj(embedded) if self.proj is not None else embedded
        for layer in self.layers:
            h = layer(h, bias)
        return self.final_ln(h)

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> ag.Tensor:
        return self.encode(self.embed(ids), mask)


class ImageEncoder(Module):
    """Non-overlapping patch flattening, linear embedding, learned global token."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        patch_dim = 3 * cfg.patch_size * cfg.patch_size
        self.patch_proj = Linear(patch_dim, cfg.d, rng, dtype=dtype)
        self.global_tok = ag.Parameter(trunc_normal((cfg.d,), rng, dtype=dtype))
        self.pos_emb = Embedding(cfg.n_patches + 1, cfg.d, rng, dtype=dtype)
        self.layers = ModuleList(
            EncoderLayer(cfg.d, cfg.heads, rng, dtype=dtype) for _ in range(cfg.image_layers)
        )
        self.final_ln = LayerNorm(cfg.d, dtype=dtype)
        self.dtype = dtype

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        px = np.asarray(pixels)
        if px.ndim == 3:
            px = px[None]
        s, p = self.cfg.image_size, self.cfg.patch_size
        if px.ndim != 4 or px.shape[1:] != (s, s, 3):
            raise InvalidInputError(f"expected image shape (B, {s}, {s}, 3), got {px.shape}")
        if px.size and (px.min() < -1e-6 or px.max() > 1.0 + 1e-6):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        b, g = px.shape[0], self.cfg.grid
        px = px.astype(self.dtype, copy=False)
        patches = px.reshape(b, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(patches.reshape(b, g * g, p * p * 3))

    def __call__(self, pixels: np.ndarray) -> ag.Tensor:
        patches = self.patchify(pixels)
        b = patches.shape[0]
        embedded = self.patch_proj(ag.Tensor(patches))
        global_row = ag.add(
            ag.reshape(self.global_tok, (1, 1, self.cfg.d)),
            np.zeros((b, 1, self.cfg.d), dtype=self.dtype),
        )
        h = ag.concat([global_row, embedded], axis=1)
        h = ag.add(h, self.pos_emb(np.arange(self.cfg.n_patches + 1)))
        for layer in self.layers:
            h = layer(h)
        return self.final_ln(h)


class FusionModule(Module):
    """Stack of fusion blocks blending text features with image features."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.layers = ModuleList(
            FusionLayer(cfg.d, cfg.heads, rng, dtype=dtype) for _ in range(cfg.fusion_layers)
        )
        self.final_ln = LayerNorm(cfg.d, dtype=dtype)
        self.dtype = dtype

    def __call__(self, text: ag.Tensor, image: ag.Tensor, mask: np.ndarray) -> ag.Tensor:
        mask = np.asarray(mask)
        if mask.ndim == 1:
            mask = mask[None, :]
        bias = mask_bias(mask, self.dtype)
        h = text
        for layer in self.layers:
            h = layer(h, image, bias)
        return self.final_ln(h)

"""Gradient-weighted cross-attention maps over image patches.

For one text/image pair, the map at a chosen text position is the head-mean
of rectified(d readout / d A * A) over that position's cross-attention row
in the chosen fusion layer, where the readout is the match head's positive
logit and A the attention probabilities. The global image position is
dropped and the remainder reshaped to the patch grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data_io import load_image
from ..errors import InvalidInputError
from ..model.network import FashionSAPModel
from ..textpipe import TokenSequence, Vocabulary, build_caption_sequence

@dataclass
class AttentionMap:
    grid: np.ndarray          # (g, g), non-negative
    text_position: int
    layer: int                # 1-based fusion layer index

    def __post_init__(self):
        if (self.grid < 0).any() or not np.isfinite(self.grid).all():
            raise InvalidInputError("attention map must be non-negative and finite")


def grad_cam(
    model: FashionSAPModel,
    seq: TokenSequence,
    image: np.ndarray,
    text_position: int,
    layer: int = 1,
) -> AttentionMap:
    """Compute the rectified gradient-weighted attention map for one pair."""
    n_layers = len(model.fusion.layers)
    if not 1 <= layer <= n_layers:
        raise InvalidInputError(f"layer must be in 1..{n_layers}, got {layer}")
    if not 0 <= text_position < len(seq):
        raise InvalidInputError(f"text position {text_position} out of range")

    text = model.encode_sequence(seq)
    img = model.encode_image(image[None] if image.ndim == 3 else image)
    h = model.fuse(text, img, seq.attention_mask[None, :])
    readout = model.itm_logits(h[:, 0])[0, 1]
    model.zero_grad()
    readout.backward()

    probs = model.fusion.layers[layer - 1].cross_attn.last_probs
    a = probs.data[0]                 # (heads, t, i_N + 1)
    da = probs.grad[0] if probs.grad is not None else np.zeros_like(a)
    weighted = np.maximum(da * a, 0.0).mean(axis=0)  # head mean, rectified
    row = weighted[text_position, 1:]                # drop the global image position
    g = model.cfg.grid
    return AttentionMap(grid=row.reshape(g, g).astype(np.float64), text_position=text_position, layer=layer)


def save_pgm(path, attention: AttentionMap) -> None:
    """8-bit ASCII PGM (P2), min-max normalized; a flat map writes zeros."""
    grid = attention.grid
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        scaled = np.round((grid - lo) / (hi - lo) * 255.0).astype(int)
    else:
        scaled = np.zeros_like(grid, dtype=int)
    lines = [f"P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def grad_cam_for_word(
    model: FashionSAPModel,
    caption: str,
    image_path,
    word: str,
    vocab: Vocabulary,
    layer: int = 1,
) -> AttentionMap:
    """Locate `word` in the [CLS]+caption sequence and map its attention."""
    seq = build_caption_sequence(caption, vocab, model.cfg.max_text_len)
    wid = vocab.token_id(word.lower())
    positions = [i for i in range(seq.n_real) if seq.ids[i] == wid]
    if not positions:
        raise InvalidInputError(f"word {word!r} not found in the caption")
    image = load_image(image_path, model.cfg.image_size)
    return grad_cam(model, seq, image, positions[0], layer=layer)

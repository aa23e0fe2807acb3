"""The full network: encoders, fusion, adapters, projections and task heads."""

from __future__ import annotations

import numpy as np

from ..core import autograd as ag
from ..core.nn import Linear, Module, ParameterStore
from ..errors import InvalidInputError, InvalidStateError
from ..taxonomy import FashionSymbol
from ..textpipe import TokenSequence
from . import checkpoint as ckpt
from .config import ModelConfig
from .encoders import FusionModule, ImageEncoder, TextEncoder

TAU_MIN, TAU_MAX = 0.001, 0.5


class PromptHead(Module):
    """Vocabulary predictor over hybrid rows (small feed-forward stack)."""

    def __init__(self, d: int, vocab_size: int, rng, dtype=np.float32):
        super().__init__()
        self.fc = Linear(d, d, rng, dtype=dtype)
        self.out = Linear(d, vocab_size, rng, dtype=dtype)

    def __call__(self, rows: ag.Tensor) -> ag.Tensor:
        return self.out(ag.gelu(self.fc(rows)))


class FashionSAPModel(Module):
    """Desk-scale vision-language model with symbol-aware text encoding.

    Parameters are float32 by default (matching the checkpoint container);
    pass dtype=np.float64 for verification work such as finite-difference
    gradient checks.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([0xFA5, seed]))
        self.text_encoder = TextEncoder(cfg, rng, dtype=dtype)
        self.image_encoder = ImageEncoder(cfg, rng, dtype=dtype)
        self.fusion = FusionModule(cfg, rng, dtype=dtype)
        self.text_adapter = Linear(cfg.d, cfg.d_1, rng, dtype=dtype)
        self.image_adapter = Linear(cfg.d, cfg.d_1, rng, dtype=dtype)
        self.its_text_proj = Linear(cfg.d, cfg.d, rng, bias=False, dtype=dtype)
        self.its_image_proj = Linear(cfg.d, cfg.d, rng, bias=False, dtype=dtype)
        self.tmir_proj = Linear(cfg.d, cfg.d, rng, bias=False, dtype=dtype)
        self.prompt_head = PromptHead(cfg.d, cfg.vocab_size, rng, dtype=dtype)
        self.trp_head = Linear(cfg.d, 2, rng, dtype=dtype)
        self.itm_head = Linear(cfg.d, 2, rng, dtype=dtype)
        # shape (1,): numpy would degrade a 0-d parameter to an immutable scalar
        self.tau = ag.Parameter(np.full(1, cfg.tau_init, dtype=dtype))

    # -- encoding ---------------------------------------------------------

    def embed_text(self, ids: np.ndarray, symbol: FashionSymbol | None = None) -> ag.Tensor:
        """Token + position embeddings; `symbol` (optional) overwrites position 1."""
        ids = np.asarray(ids, dtype=np.int64)
        if symbol is not None:
            ids = ids.copy()
            ids[..., 1] = 4 + int(symbol)
        return self.text_encoder.embed(ids)

    def encode_text(self, embedded: ag.Tensor, mask: np.ndarray) -> ag.Tensor:
        return self.text_encoder.encode(embedded, mask)

    def encode_text_ids(self, ids: np.ndarray, mask: np.ndarray) -> ag.Tensor:
        return self.text_encoder(ids, mask)

    def encode_sequence(self, seq: TokenSequence) -> ag.Tensor:
        return self.text_encoder(seq.ids[None, :], seq.attention_mask[None, :])

    def encode_image(self, pixels: np.ndarray) -> ag.Tensor:
        return self.image_encoder(pixels)

    def fuse(self, text: ag.Tensor, image: ag.Tensor, mask: np.ndarray) -> ag.Tensor:
        if text.shape[0] != image.shape[0]:
            raise InvalidInputError(
                f"batch mismatch between text ({text.shape[0]}) and image ({image.shape[0]})"
            )
        return self.fusion(text, image, mask)

    def cross_attention_layer(self, text: ag.Tensor, image: ag.Tensor, k: int) -> ag.Tensor:
        """Apply only the k-th fusion block's cross-attention (0-based index)."""
        if not 0 <= k < len(self.fusion.layers):
            raise InvalidInputError(f"fusion layer index {k} out of range")
        return self.fusion.layers[k].cross_attn(text, image)

    # -- projections and heads ---------------------------------------------

    def adapt(self, v: ag.Tensor, which: str) -> ag.Tensor:
        """Project into the adapted latent space and scale to unit length."""
        if which == "text_side":
            return ag.l2_normalize(self.text_adapter(v))
        if which == "image_side":
            return ag.l2_normalize(self.image_adapter(v))
        raise InvalidInputError(f"which must be text_side|image_side, got {which!r}")

    def proj_its(self, v: ag.Tensor, which: str) -> ag.Tensor:
        """Similarity-space projection, unit-normalized."""
        if which == "text_side":
            return ag.l2_normalize(self.its_text_proj(v))
        if which == "image_side":
            return ag.l2_normalize(self.its_image_proj(v))
        raise InvalidInputError(f"which must be text_side|image_side, got {which!r}")

    def prompt_logits(self, rows: ag.Tensor) -> ag.Tensor:
        return self.prompt_head(rows)

    def trp_logits(self, rows: ag.Tensor) -> ag.Tensor:
        return self.trp_head(rows)

    def itm_logits(self, h0: ag.Tensor) -> ag.Tensor:
        return self.itm_head(h0)

    def tau_value(self) -> float:
        return float(self.tau.data[0])

    def clamp_tau(self) -> None:
        np.clip(self.tau.data, TAU_MIN, TAU_MAX, out=self.tau.data)

    # -- persistence --------------------------------------------------------

    def param_store(self) -> ParameterStore:
        return ParameterStore.of(self)

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        arrays = {name: p.data for name, p in self.named_parameters()}
        if extra:
            overlap = set(arrays) & set(extra)
            if overlap:
                raise InvalidStateError(f"extra state clashes with parameters: {sorted(overlap)[:3]}")
            arrays.update(extra)
        ckpt.save_checkpoint(path, arrays, self.cfg.digest())

    def load(self, path, expect_same_config: bool = True) -> dict[str, np.ndarray]:
        """Load parameters by name; returns any non-parameter arrays (trainer state)."""
        arrays, digest = ckpt.load_checkpoint(path)
        if expect_same_config and digest != self.cfg.digest():
            raise InvalidStateError(f"{path}: checkpoint was written with a different model config")
        own = dict(self.named_parameters())
        extra: dict[str, np.ndarray] = {}
        for name, arr in arrays.items():
            if name in own:
                p = own[name]
                if tuple(arr.shape) != tuple(p.data.shape):
                    raise InvalidStateError(f"shape mismatch for {name}")
                p.data = arr.astype(self.dtype)
            else:
                extra[name] = arr
        missing = [n for n in own if n not in arrays]
        if missing:
            raise InvalidStateError(f"checkpoint missing parameters: {missing[:5]}")
        return extra

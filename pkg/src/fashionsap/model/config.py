"""Model and training configuration.

The dataclass defaults are the desk-scale configuration: small dims, few
layers, 32x32 images, trainable on a CPU in minutes. The production-scale
values (6-layer text encoder, 12-layer patch encoder, 256x256 images, queue
65535, batch 16, lr 6e-5) are kept as the named `full_scale` presets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import hashlib
import json

from ..errors import InvalidConfigError


@dataclass
class ModelConfig:
    d: int = 32            # fused feature dim
    d_e: int = 32          # text embedding dim
    d_1: int = 16          # adapted latent dim
    text_layers: int = 2
    image_layers: int = 2
    fusion_layers: int = 2
    heads: int = 4
    patch_size: int = 8
    image_size: int = 32
    vocab_size: int = 256
    max_text_len: int = 24
    tau_init: float = 0.07
    queue_size: int = 64
    momentum: float = 0.995
    distill_weight: float = 0.4

    def validate(self) -> "ModelConfig":
        if min(self.d, self.d_e, self.d_1) < 1:
            raise InvalidConfigError("feature dims must be >= 1")
        if self.d % self.heads != 0:
            raise InvalidConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.image_size % self.patch_size != 0:
            raise InvalidConfigError(
                f"image_size={self.image_size} not divisible by patch_size={self.patch_size}"
            )
        if min(self.text_layers, self.image_layers, self.fusion_layers, self.heads) < 1:
            raise InvalidConfigError("layer/head counts must be >= 1")
        if self.vocab_size < 15:
            raise InvalidConfigError("vocab_size must cover the reserved tokens")
        if self.max_text_len < 2:
            raise InvalidConfigError("max_text_len must be >= 2")
        if self.tau_init <= 0:
            raise InvalidConfigError("tau_init must be > 0")
        if self.queue_size < 0:
            raise InvalidConfigError("queue_size must be >= 0")
        if not 0.0 < self.momentum <= 1.0:
            raise InvalidConfigError("momentum must be in (0, 1]")
        if not 0.0 <= self.distill_weight < 1.0:
            raise InvalidConfigError("distill_weight must be in [0, 1)")
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def digest(self) -> bytes:
        payload = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).digest()


@dataclass
class TrainConfig:
    lr: float = 2e-3              # desk default; the full_scale preset uses 6e-5
    weight_decay: float = 0.02
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 200
    fsis_form: str = "per_sample"        # or "as_printed"
    negative_sampling: str = "similarity"  # or "uniform"
    prompts_per_record: int = 1
    distill_warmup: int = 200     # steps to ramp the distillation weight from 0

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise InvalidConfigError("lr must be > 0")
        if self.batch_size < 2:
            raise InvalidConfigError("batch_size must be >= 2 (in-batch negatives)")
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        if self.weight_decay < 0:
            raise InvalidConfigError("weight_decay must be >= 0")
        if self.fsis_form not in ("per_sample", "as_printed"):
            raise InvalidConfigError(f"fsis_form must be per_sample|as_printed, got {self.fsis_form!r}")
        if self.negative_sampling not in ("similarity", "uniform"):
            raise InvalidConfigError(
                f"negative_sampling must be similarity|uniform, got {self.negative_sampling!r}"
            )
        if self.prompts_per_record < 0:
            raise InvalidConfigError("prompts_per_record must be >= 0")
        if self.checkpoint_every < 0:
            raise InvalidConfigError("checkpoint_every must be >= 0")
        if self.distill_warmup < 0:
            raise InvalidConfigError("distill_warmup must be >= 0")
        return self


def full_scale_model_config() -> ModelConfig:
    return ModelConfig(
        d=768, d_e=768, d_1=256,
        text_layers=6, image_layers=12, fusion_layers=6, heads=12,
        patch_size=16, image_size=256,
        vocab_size=30522, max_text_len=64,
        tau_init=0.07, queue_size=65535, momentum=0.995, distill_weight=0.4,
    )


def full_scale_train_config() -> TrainConfig:
    return TrainConfig(lr=6e-5, batch_size=16, steps=200_000, checkpoint_every=10_000)


_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}


def configs_from_dict(raw: dict) -> tuple[ModelConfig, TrainConfig]:
    """Split a flat config mapping into validated model/train configs.

    Unknown keys are rejected so that typos cannot silently fall back to
    defaults.
    """
    if not isinstance(raw, dict):
        raise InvalidConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - _MODEL_FIELDS - _TRAIN_FIELDS)
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {', '.join(unknown)}")
    mc = ModelConfig(**{k: v for k, v in raw.items() if k in _MODEL_FIELDS})
    tc = TrainConfig(**{k: v for k, v in raw.items() if k in _TRAIN_FIELDS})
    return mc.validate(), tc.validate()

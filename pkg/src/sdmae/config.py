"""Configuration dataclasses, named presets and the config fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional

from .errors import ConfigError

LOSS_MODES = ("mae", "decoupled_pixel", "decoupled_feature_mse", "sd_mae")


@dataclass
class HeadConfig:
    """Projection head used on both sides of the self-distillation loss."""

    hidden_dim: int = 4096
    bottleneck_dim: int = 256
    out_dim: int = 4096
    temp_student: float = 0.1
    temp_teacher: float = 0.04
    # "pre_projection": decoder features before the pixel projection;
    # "post_projection": the D-dim pixel predictions.
    teacher_input: str = "pre_projection"
    # "encoded" feeds encoder outputs to the student, "projected" the
    # pre-encoder patch tokens.
    student_input: str = "encoded"
    stop_gradient: bool = True

    def validate(self) -> None:
        if min(self.hidden_dim, self.bottleneck_dim, self.out_dim) <= 0:
            raise ConfigError("head dimensions must be positive")
        if not 0 < self.temp_teacher <= self.temp_student:
            raise ConfigError(f"need 0 < temp_teacher <= temp_student, got {self.temp_teacher}, {self.temp_student}")
        if self.teacher_input not in ("pre_projection", "post_projection"):
            raise ConfigError(f"unknown teacher_input {self.teacher_input!r}")
        if self.student_input not in ("encoded", "projected"):
            raise ConfigError(f"unknown student_input {self.student_input!r}")


@dataclass
class ModelConfig:
    img_size: int = 224
    patch_size: int = 16
    in_chans: int = 3
    enc_depth: int = 12
    enc_width: int = 384
    enc_heads: int = 6
    dec_depth: int = 4
    dec_width: int = 192
    dec_heads: int = 3
    mlp_ratio: float = 4.0
    pos_embed: str = "sincos"
    # per-channel standardization applied to encoder inputs only
    input_mean: tuple = (0.485, 0.456, 0.406)
    input_std: tuple = (0.229, 0.224, 0.225)
    head: HeadConfig = field(default_factory=HeadConfig)

    @property
    def num_patches(self) -> int:
        return (self.img_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_chans

    def validate(self) -> None:
        if self.img_size % self.patch_size:
            raise ConfigError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.enc_width % self.enc_heads or self.dec_width % self.dec_heads:
            raise ConfigError("encoder/decoder width must be divisible by its head count")
        if self.pos_embed not in ("sincos", "learned"):
            raise ConfigError(f"unknown pos_embed {self.pos_embed!r}")
        if self.pos_embed == "sincos" and (self.enc_width % 4 or self.dec_width % 4):
            raise ConfigError("2D sin-cos embeddings need widths divisible by 4")
        if len(self.input_mean) != self.in_chans or len(self.input_std) != self.in_chans:
            raise ConfigError("input_mean/input_std need one entry per channel")
        if min(self.input_std) <= 0:
            raise ConfigError("input_std entries must be positive")
        self.head.validate()


@dataclass
class LossWeights:
    mode: str = "sd_mae"
    alpha: float = 0.2
    beta: float = 0.2

    def validate(self) -> None:
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"unknown loss mode {self.mode!r}; choose from {', '.join(LOSS_MODES)}")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"alpha and beta must lie in [0, 1], got {self.alpha}, {self.beta}")


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    base_lr: float = 1.5e-4
    ft_lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 64
    mask_ratio: float = 0.6
    betas: tuple = (0.9, 0.95)
    lr_batch_scaling: bool = True
    augment: bool = True
    freeze_masks: bool = False
    checkpoint_every: int = 10
    ft_epochs: int = 20
    ft_warmup_epochs: int = 2
    probe_epochs: int = 100
    seed: int = 0
    preset: Optional[str] = None
    loss: LossWeights = field(default_factory=LossWeights)

    def effective_lr(self, lr: Optional[float] = None) -> float:
        lr = self.base_lr if lr is None else lr
        return lr * self.batch_size / 256 if self.lr_batch_scaling else lr

    def validate(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("warmup_epochs must lie in [0, epochs]")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in [0, 1), got {self.mask_ratio}")
        if self.preset is not None and self.preset not in TRAIN_PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        self.loss.validate()


# Hyper-parameter conditions S1-S4: pre-training lr, fine-tuning lr, weight decay.
TRAIN_PRESETS: Dict[str, Dict[str, float]] = {
    "S1": {"base_lr": 1e-4, "ft_lr": 5e-4, "weight_decay": 5e-3},
    "S2": {"base_lr": 1e-4, "ft_lr": 5e-4, "weight_decay": 5e-2},
    "S3": {"base_lr": 1.5e-4, "ft_lr": 5e-4, "weight_decay": 5e-2},
    "S4": {"base_lr": 1.5e-4, "ft_lr": 1e-3, "weight_decay": 5e-2},
}


def apply_preset(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(TRAIN_PRESETS)}")
    return dataclasses.replace(cfg, preset=name, **TRAIN_PRESETS[name])


def vit_small(**overrides) -> ModelConfig:
    return dataclasses.replace(ModelConfig(), **overrides)


def desk_model(**overrides) -> ModelConfig:
    """Small ViT for CPU-scale experiments on 32x32 synthetic textures."""
    cfg = ModelConfig(
        img_size=32,
        patch_size=4,
        enc_depth=4,
        enc_width=64,
        enc_heads=4,
        dec_depth=2,
        dec_width=32,
        dec_heads=2,
        head=HeadConfig(hidden_dim=256, bottleneck_dim=64, out_dim=256),
    )
    return dataclasses.replace(cfg, **overrides)


def tiny_model(**overrides) -> ModelConfig:
    """Gradient-check geometry: 8x8 images, 4x4 patches, K=7 head outputs."""
    cfg = ModelConfig(
        img_size=8,
        patch_size=4,
        enc_depth=2,
        enc_width=16,
        enc_heads=2,
        dec_depth=1,
        dec_width=8,
        dec_heads=2,
        head=HeadConfig(hidden_dim=16, bottleneck_dim=8, out_dim=7),
    )
    return dataclasses.replace(cfg, **overrides)


MODEL_PRESETS = {"vit_s": vit_small, "desk": desk_model, "tiny": tiny_model}


def to_dict(cfg) -> Dict[str, Any]:
    d = dataclasses.asdict(cfg)
    for key in _TUPLE_FIELDS:
        if key in d:
            d[key] = list(d[key])
    return d


def from_dict(cls, data: Dict[str, Any]):
    """Build a (possibly nested) config dataclass, rejecting unknown keys."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None and isinstance(value, dict):
            value = from_dict(sub, value)
        elif name in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


_TUPLE_FIELDS = ("betas", "input_mean", "input_std")
_NESTED = {(ModelConfig, "head"): HeadConfig, (TrainConfig, "loss"): LossWeights}


def fingerprint(model_cfg: ModelConfig, train_cfg: Optional[TrainConfig] = None) -> str:
    payload = {"model": to_dict(model_cfg)}
    if train_cfg is not None:
        payload["train"] = to_dict(train_cfg)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()

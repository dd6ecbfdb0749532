"""Masked-autoencoder pretraining with a visible-patch self-distillation loss."""

from .config import HeadConfig, LossWeights, ModelConfig, TrainConfig, apply_preset, desk_model, tiny_model, vit_small
from .errors import SDMAEError
from .model import SDMAE
from .patching import MaskPlan, PatchSequence, patchify, random_mask, unpatchify

__all__ = [
    "HeadConfig",
    "LossWeights",
    "MaskPlan",
    "ModelConfig",
    "PatchSequence",
    "SDMAE",
    "SDMAEError",
    "TrainConfig",
    "apply_preset",
    "desk_model",
    "patchify",
    "random_mask",
    "tiny_model",
    "unpatchify",
    "vit_small",
]
__version__ = "0.1.0"

"""Patch sequences, random mask plans and per-patch normalized targets.

Layout conventions (frozen, checkpoints depend on them):

* images are channels-last ``(B, H, W, C)`` with values in ``[0, 1]``;
* patches are numbered row-major over the patch grid, top-left first;
* inside a patch, pixels are flattened row-major with the channel index
  varying fastest, so ``D = P * P * C``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .errors import DimensionError, ParameterError

TARGET_EPS = 1e-6

ArrayLike = Union[torch.Tensor, np.ndarray]


@dataclass
class PatchSequence:
    patches: torch.Tensor  # (B, N, D)
    patch_size: int
    channels: int

    @property
    def num_patches(self) -> int:
        return self.patches.shape[1]

    @property
    def grid_size(self) -> int:
        return math.isqrt(self.num_patches)


@dataclass
class MaskPlan:
    """Partition of every image's patch indices into visible and masked sets.

    Both index tensors are sorted ascending within each row.
    """

    visible_idx: torch.Tensor  # (B, V) int64
    masked_idx: torch.Tensor  # (B, M) int64
    ratio: float
    seed: Union[int, Sequence[int], None]

    @property
    def num_visible(self) -> int:
        return self.visible_idx.shape[1]

    @property
    def num_masked(self) -> int:
        return self.masked_idx.shape[1]

    @property
    def num_patches(self) -> int:
        return self.num_visible + self.num_masked

    @property
    def batch_size(self) -> int:
        return self.visible_idx.shape[0]

    def to(self, device) -> "MaskPlan":
        return MaskPlan(self.visible_idx.to(device), self.masked_idx.to(device), self.ratio, self.seed)


def as_image_batch(img: ArrayLike) -> torch.Tensor:
    x = torch.as_tensor(img)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise DimensionError(f"expected an image batch (B, H, W, C), got shape {tuple(x.shape)}")
    if not torch.is_floating_point(x):
        x = x.float()
    return x


def patchify(img: ArrayLike, patch_size: int) -> PatchSequence:
    x = as_image_batch(img)
    B, H, W, C = x.shape
    P = int(patch_size)
    if H != W or P <= 0 or H % P != 0:
        raise DimensionError(f"cannot patchify image with H={H}, W={W} using P={P}: need H == W and H % P == 0")
    g = H // P
    x = x.reshape(B, g, P, g, P, C).permute(0, 1, 3, 2, 4, 5)
    return PatchSequence(x.reshape(B, g * g, P * P * C), P, C)


def unpatchify(seq: PatchSequence) -> torch.Tensor:
    x = seq.patches
    if x.ndim != 3:
        raise DimensionError(f"patch tensor must be (B, N, D), got {tuple(x.shape)}")
    B, N, D = x.shape
    P, C = seq.patch_size, seq.channels
    g = math.isqrt(N)
    if g * g != N or D != P * P * C:
        raise DimensionError(f"inconsistent patch sequence: N={N}, D={D}, P={P}, C={C}")
    x = x.reshape(B, g, g, P, P, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * P, g * P, C)


def num_masked(num_patches: int, ratio: float) -> int:
    return int(math.floor(ratio * num_patches))


def random_mask(seq: Union[PatchSequence, torch.Tensor], mu: float, seed: Union[int, Sequence[int]]) -> MaskPlan:
    """Draw ``floor(mu * N)`` masked indices per image, uniformly without replacement.

    ``seed`` is either one integer for the whole batch (images drawn in order
    from one generator) or a sequence with one seed per image, which lets a
    caller pin each image's plan independently of batch composition.
    """
    if not 0.0 <= mu < 1.0:
        raise ParameterError(f"masking ratio must lie in [0, 1), got {mu}")
    patches = seq.patches if isinstance(seq, PatchSequence) else seq
    B, N = patches.shape[0], patches.shape[1]
    M = num_masked(N, mu)

    if isinstance(seed, (int, np.integer)):
        gen = torch.Generator().manual_seed(int(seed))
        perms = [torch.randperm(N, generator=gen) for _ in range(B)]
    else:
        seeds = list(seed)
        if len(seeds) != B:
            raise ParameterError(f"got {len(seeds)} per-image seeds for a batch of {B}")
        perms = [torch.randperm(N, generator=torch.Generator().manual_seed(int(s))) for s in seeds]
    perm = torch.stack(perms) if B else torch.empty(0, N, dtype=torch.long)
    masked = perm[:, :M].sort(dim=1).values
    visible = perm[:, M:].sort(dim=1).values
    return MaskPlan(visible.to(patches.device), masked.to(patches.device), float(mu), seed)


def full_plan(batch_size: int, num_patches: int, device=None) -> MaskPlan:
    """Plan with nothing masked (used for feature extraction and attention maps)."""
    vis = torch.arange(num_patches, device=device).expand(batch_size, num_patches).clone()
    return MaskPlan(vis, torch.empty(batch_size, 0, dtype=torch.long, device=device), 0.0, None)


def gather_patches(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Select rows ``idx`` (B, K) from ``x`` (B, N, ...) along the token axis."""
    index = idx.reshape(idx.shape + (1,) * (x.ndim - 2)).expand(idx.shape + x.shape[2:])
    return torch.gather(x, 1, index)


def normalize_patches(patches: torch.Tensor, eps: float = TARGET_EPS) -> torch.Tensor:
    """Standardize each length-D row by its own mean and population variance."""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, unbiased=False, keepdim=True)
    return (patches - mean) / torch.sqrt(var + eps)


def normalize_targets(seq: PatchSequence, plan: MaskPlan, which: str = "masked") -> torch.Tensor:
    """Normalized reconstruction targets for the masked (default) or visible patches."""
    patches = seq.patches
    if plan.batch_size != patches.shape[0] or plan.num_patches != patches.shape[1]:
        raise DimensionError(
            f"mask plan covers {plan.batch_size}x{plan.num_patches} patches, sequence has {tuple(patches.shape[:2])}"
        )
    idx = plan.masked_idx if which == "masked" else plan.visible_idx
    return normalize_patches(gather_patches(patches, idx))

"""Reconstruction, decoupled, feature-MSE and self-distillation losses.

Loss modes map onto the ablation ladder as follows::

    mae                      masked pixels only
    decoupled_pixel          (1-a) masked pixels + a visible pixels
    decoupled_feature_mse    (1-a) masked pixels + a visible encoder features
    sd_mae                   (1-b) masked pixels + b self-distillation
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch

from .config import LossWeights
from .distillation import DistributionPair
from .errors import ContractError, DimensionError, ParameterError

LOG_CLAMP = 1e-12
ROW_SUM_TOL = 1e-4


def mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ in shape")
    if pred.numel() == 0:
        return pred.new_zeros(())
    return ((pred - target) ** 2).mean()


def loss_mae(y_m: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Element-mean squared error over the masked patches."""
    if y_m.numel() == 0 and y_m.shape == targets.shape:
        warnings.warn("no masked patches (mask ratio 0); reconstruction loss defined as 0", RuntimeWarning)
    return mse(y_m, targets)


def loss_decoupled(y_m, y_v, targets_m, targets_v, alpha: float) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * mse(y_m, targets_m) + alpha * mse(y_v, targets_v)


def loss_feature_mse(target: torch.Tensor, prediction: torch.Tensor) -> torch.Tensor:
    """MSE between encoder features (target, detached here) and adapted decoder features."""
    return mse(prediction, target.detach())


def loss_distill(pair: DistributionPair) -> torch.Tensor:
    """Cross-entropy -sum_k p_k log q_k, averaged over all (batch, token) rows."""
    p, q = pair.p, pair.q
    if p.shape != q.shape:
        raise DimensionError(f"teacher {tuple(p.shape)} and student {tuple(q.shape)} shapes differ")
    if p.numel() == 0:
        return q.new_zeros(())
    for name, t in (("p", p), ("q", q)):
        s = t.detach().sum(dim=-1)
        if (t.detach() < 0).any() or (s - 1).abs().max() > ROW_SUM_TOL:
            raise ContractError(f"{name} rows must be probability vectors (max |sum-1| = {(s - 1).abs().max():.3g})")
    return -(p * torch.log(q.clamp_min(LOG_CLAMP))).sum(dim=-1).mean()


def loss_total(recon: torch.Tensor, distill: torch.Tensor, beta: float) -> torch.Tensor:
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    return (1.0 - beta) * recon + beta * distill


@dataclass
class LossReport:
    total: torch.Tensor
    recon_masked: torch.Tensor
    recon_visible: Optional[torch.Tensor]
    distill: Optional[torch.Tensor]
    counts: Tuple[int, int]  # (M, V)
    mode: str

    def components(self) -> Dict[str, float]:
        out = {"total": self.total, "recon_masked": self.recon_masked}
        if self.recon_visible is not None:
            out["recon_visible"] = self.recon_visible
        if self.distill is not None:
            out["distill"] = self.distill
        return {k: v.detach().item() for k, v in out.items()}


def metric_columns(mode: str) -> List[str]:
    """Loss columns logged for a mode."""
    cols = ["total", "recon_masked"]
    if mode in ("decoupled_pixel", "decoupled_feature_mse"):
        cols.append("recon_visible")
    if mode == "sd_mae":
        cols.append("distill")
    return cols


def combine(report: LossReport, weights: LossWeights) -> float:
    """Recompute ``total`` from the logged components (used to audit logs)."""
    if weights.mode == "mae":
        return report.recon_masked
    if weights.mode == "sd_mae":
        return (1 - weights.beta) * report.recon_masked + weights.beta * report.distill
    return (1 - weights.alpha) * report.recon_masked + weights.alpha * report.recon_visible


def entropy(p: torch.Tensor) -> torch.Tensor:
    """Row-wise Shannon entropy in nats."""
    return -(p * torch.log(p.clamp_min(LOG_CLAMP))).sum(dim=-1)


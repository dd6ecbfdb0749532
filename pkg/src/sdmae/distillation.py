"""Student/teacher projection heads for self-distillation on visible patches."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import HeadConfig

L2_EPS = 1e-12


class ProjectionHead(nn.Module):
    """MLP -> L2-normalized bottleneck -> weight-normalized linear map to K logits.

    The last layer's rows are divided by their norm on every call (unit
    gain), so the logits are cosine similarities between the bottleneck
    vector and K prototype directions.
    """

    def __init__(self, in_dim: int, cfg: HeadConfig):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(cfg.hidden_dim, cfg.bottleneck_dim),
        )
        self.last_weight = nn.Parameter(torch.empty(cfg.out_dim, cfg.bottleneck_dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.last_weight, std=0.02)

    def bottleneck(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.mlp(x), dim=-1, eps=L2_EPS)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        w = F.normalize(self.last_weight, dim=-1, eps=L2_EPS)
        return self.bottleneck(x) @ w.t()


def student_head(f_v: torch.Tensor, cfg: HeadConfig, head: ProjectionHead) -> torch.Tensor:
    return torch.softmax(head.logits(f_v) / cfg.temp_student, dim=-1)


def teacher_head(y_v: torch.Tensor, cfg: HeadConfig, head: ProjectionHead) -> torch.Tensor:
    """Teacher distribution; cut from the graph when ``cfg.stop_gradient`` is set."""
    if cfg.stop_gradient:
        with torch.no_grad():
            return torch.softmax(head.logits(y_v) / cfg.temp_teacher, dim=-1)
    return torch.softmax(head.logits(y_v) / cfg.temp_teacher, dim=-1)


@dataclass
class DistributionPair:
    q: torch.Tensor  # student, (B, V, K)
    p: torch.Tensor  # teacher, (B, V, K)

"""The full pretraining network: backbone, distillation heads, feature adapter."""

from __future__ import annotations

from typing import Tuple

import torch
import torch.nn as nn

from .backbone import LatentBundle, MaskedAutoencoderViT, init_weights
from .config import LossWeights, ModelConfig
from .distillation import DistributionPair, ProjectionHead, student_head, teacher_head
from .objectives import LossReport, loss_distill, loss_feature_mse, loss_mae, loss_total, mse
from .patching import MaskPlan, PatchSequence, normalize_targets


class SDMAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = MaskedAutoencoderViT(cfg)
        teacher_dim = cfg.dec_width if cfg.head.teacher_input == "pre_projection" else cfg.patch_dim
        self.student_head = ProjectionHead(cfg.enc_width, cfg.head)
        self.teacher_head = ProjectionHead(teacher_dim, cfg.head)
        self.feature_adapter = nn.Linear(cfg.dec_width, cfg.enc_width)
        init_weights(self.feature_adapter)

    def forward(self, seq: PatchSequence, plan: MaskPlan, mode: str = "sd_mae") -> LatentBundle:
        bundle = self.backbone(seq, plan)
        if mode == "sd_mae":
            pair = self.distributions(bundle)
            bundle.q, bundle.p = pair.q, pair.p
        elif mode == "decoupled_feature_mse":
            bundle.feature_pred = self.feature_adapter(bundle.h_v)
        return bundle

    def distributions(self, bundle: LatentBundle) -> DistributionPair:
        head = self.cfg.head
        student_in = bundle.f_v if head.student_input == "encoded" else bundle.z_v
        teacher_in = bundle.h_v if head.teacher_input == "pre_projection" else bundle.y_v
        return DistributionPair(
            q=student_head(student_in, head, self.student_head),
            p=teacher_head(teacher_in, head, self.teacher_head),
        )

    def loss(self, seq: PatchSequence, plan: MaskPlan, weights: LossWeights) -> Tuple[LossReport, LatentBundle]:
        bundle = self(seq, plan, weights.mode)
        recon_m = loss_mae(bundle.y_m, normalize_targets(seq, plan, "masked"))
        recon_v = distill = None
        if weights.mode == "mae":
            total = recon_m
        elif weights.mode == "decoupled_pixel":
            recon_v = mse(bundle.y_v, normalize_targets(seq, plan, "visible"))
            total = (1 - weights.alpha) * recon_m + weights.alpha * recon_v
        elif weights.mode == "decoupled_feature_mse":
            recon_v = loss_feature_mse(bundle.f_v, bundle.feature_pred)
            total = (1 - weights.alpha) * recon_m + weights.alpha * recon_v
        else:
            distill = loss_distill(DistributionPair(q=bundle.q, p=bundle.p))
            total = loss_total(recon_m, distill, weights.beta)
        report = LossReport(total, recon_m, recon_v, distill, (plan.num_masked, plan.num_visible), weights.mode)
        return report, bundle

"""ViT encoder over visible tokens and a light transformer decoder.

The encoder only ever sees the visible patches (plus a class token); the
decoder re-inserts one shared learnable mask token at every masked slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import DimensionError, NumericError
from .patching import MaskPlan, PatchSequence, full_plan, gather_patches, patchify

LN_EPS = 1e-6


def _sincos_1d(width: int, pos: np.ndarray) -> np.ndarray:
    omega = np.arange(width // 2, dtype=np.float64) / (width / 2.0)
    omega = 1.0 / 10000**omega
    out = np.einsum("m,d->md", pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(width: int, grid_size: int, cls_token: bool = True) -> np.ndarray:
    """Fixed 2D sin-cos table of shape (grid_size**2 [+1], width).

    Half the channels encode the row coordinate, half the column; the class
    token slot (row 0) is all zeros.
    """
    if width % 4:
        raise DimensionError(f"sin-cos embedding width must be divisible by 4, got {width}")
    gh, gw = np.meshgrid(np.arange(grid_size, dtype=np.float64), np.arange(grid_size, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(width // 2, gh), _sincos_1d(width // 2, gw)], axis=1)
    if cls_token:
        emb = np.concatenate([np.zeros((1, width)), emb], axis=0)
    return emb


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        B, L, C = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, C)
        out = self.proj(out)
        return (out, attn) if return_attention else out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, return_attention: bool = False):
        if return_attention:
            a, attn = self.attn(self.norm1(x), return_attention=True)
            x = x + a
            return x + self.mlp(self.norm2(x)), attn
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class LatentBundle:
    z_v: torch.Tensor  # (B, V, enc_width) projected visible tokens incl. positions
    f_v: torch.Tensor  # (B, V, enc_width) encoder outputs
    cls: torch.Tensor  # (B, enc_width) encoder class token
    y: torch.Tensor  # (B, N, D) pixel predictions
    y_m: torch.Tensor  # (B, M, D)
    y_v: torch.Tensor  # (B, V, D)
    h: torch.Tensor  # (B, N, dec_width) decoder features before the pixel projection
    h_v: torch.Tensor  # (B, V, dec_width)
    plan: MaskPlan
    q: Optional[torch.Tensor] = None
    p: Optional[torch.Tensor] = None
    feature_pred: Optional[torch.Tensor] = None


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _check_finite(x: torch.Tensor, where: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after {where}")


class MaskedAutoencoderViT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.check_finite = True
        N, D, g = cfg.num_patches, cfg.patch_dim, cfg.img_size // cfg.patch_size

        # channel index varies fastest inside a flattened patch
        reps = cfg.patch_size * cfg.patch_size
        self.register_buffer("input_mean", torch.tensor(cfg.input_mean, dtype=torch.float32).repeat(reps))
        self.register_buffer("input_std", torch.tensor(cfg.input_std, dtype=torch.float32).repeat(reps))
        self.patch_embed = nn.Linear(D, cfg.enc_width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.enc_width))
        self.blocks = nn.ModuleList(Block(cfg.enc_width, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth))
        self.norm = nn.LayerNorm(cfg.enc_width, eps=LN_EPS) if cfg.enc_depth > 0 else nn.Identity()

        self.decoder_embed = nn.Linear(cfg.enc_width, cfg.dec_width)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.dec_width))
        self.decoder_blocks = nn.ModuleList(
            Block(cfg.dec_width, cfg.dec_heads, cfg.mlp_ratio) for _ in range(cfg.dec_depth)
        )
        self.decoder_norm = nn.LayerNorm(cfg.dec_width, eps=LN_EPS)
        self.decoder_pred = nn.Linear(cfg.dec_width, D)

        if cfg.pos_embed == "sincos":
            self.register_buffer("pos_embed", torch.from_numpy(sincos_pos_embed(cfg.enc_width, g)).float()[None])
            self.register_buffer("decoder_pos_embed", torch.from_numpy(sincos_pos_embed(cfg.dec_width, g)).float()[None])
        else:
            self.pos_embed = nn.Parameter(torch.zeros(1, N + 1, cfg.enc_width))
            self.decoder_pos_embed = nn.Parameter(torch.zeros(1, N + 1, cfg.dec_width))
            nn.init.trunc_normal_(self.pos_embed, std=0.02)
            nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02)

        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def encoder_parameters(self):
        """Parameters needed to produce encoder features (the transferable part)."""
        for name, p in self.named_parameters():
            if not name.startswith("decoder") and name != "mask_token":
                yield name, p

    # -- encoder -----------------------------------------------------------
    def embed_visible(self, seq: PatchSequence, plan: MaskPlan) -> torch.Tensor:
        x = seq.patches
        if x.shape[-1] != self.patch_embed.in_features or x.shape[1] != self.cfg.num_patches:
            raise DimensionError(
                f"patch sequence {tuple(x.shape)} does not match model (N={self.cfg.num_patches}, "
                f"D={self.patch_embed.in_features})"
            )
        x_v = (gather_patches(x, plan.visible_idx) - self.input_mean) / self.input_std
        pos = self.pos_embed[0, 1:].expand(x.shape[0], -1, -1)
        return self.patch_embed(x_v) + gather_patches(pos, plan.visible_idx)

    def encode(self, z_v: torch.Tensor, return_attention: bool = False):
        """Run the encoder; returns ``(F_v, cls)`` and optionally last-layer attention."""
        if z_v.shape[-1] != self.cfg.enc_width:
            raise DimensionError(f"token width {z_v.shape[-1]} != encoder width {self.cfg.enc_width}")
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(z_v.shape[0], -1, -1)
        x = torch.cat([cls, z_v], dim=1)
        attn = None
        last = len(self.blocks) - 1
        for i, blk in enumerate(self.blocks):
            if return_attention and i == last:
                x, attn = blk(x, return_attention=True)
            else:
                x = blk(x)
            if self.check_finite:
                _check_finite(x, f"encoder block {i}")
        x = self.norm(x)
        if return_attention:
            return x[:, 1:], x[:, 0], attn
        return x[:, 1:], x[:, 0]

    # -- decoder -----------------------------------------------------------
    def decoder_input(self, f_v: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
        """Full-length decoder input: projected features at visible slots, mask token elsewhere, plus positions."""
        B, V, _ = f_v.shape
        N = self.cfg.num_patches
        if V != plan.num_visible or B != plan.batch_size or plan.num_patches != N:
            raise DimensionError(
                f"features (B={B}, V={V}) do not match plan (B={plan.batch_size}, V={plan.num_visible}, N={plan.num_patches})"
            )
        x_v = self.decoder_embed(f_v)
        full = self.mask_token.expand(B, N, -1)
        index = plan.visible_idx.unsqueeze(-1).expand(-1, -1, x_v.shape[-1])
        full = full.scatter(1, index, x_v)
        return full + self.decoder_pos_embed[:, 1:]

    def decode(self, f_v: torch.Tensor, plan: MaskPlan):
        """Returns ``(Y, H)``: pixel predictions (B, N, D) and pre-projection features (B, N, dec_width)."""
        x = self.decoder_input(f_v, plan)
        for i, blk in enumerate(self.decoder_blocks):
            x = blk(x)
            if self.check_finite:
                _check_finite(x, f"decoder block {i}")
        h = self.decoder_norm(x)
        return self.decoder_pred(h), h

    def forward(self, seq: PatchSequence, plan: MaskPlan) -> LatentBundle:
        z_v = self.embed_visible(seq, plan)
        f_v, cls = self.encode(z_v)
        y, h = self.decode(f_v, plan)
        return LatentBundle(
            z_v=z_v,
            f_v=f_v,
            cls=cls,
            y=y,
            y_m=gather_patches(y, plan.masked_idx),
            y_v=gather_patches(y, plan.visible_idx),
            h=h,
            h_v=gather_patches(h, plan.visible_idx),
            plan=plan,
        )

    # -- full-image paths --------------------------------------------------
    def _full_image_tokens(self, img) -> Tuple[torch.Tensor, MaskPlan]:
        dtype = self.patch_embed.weight.dtype
        seq = patchify(torch.as_tensor(img).to(dtype), self.cfg.patch_size)
        plan = full_plan(seq.patches.shape[0], seq.num_patches, seq.patches.device)
        return self.embed_visible(seq, plan), plan

    def features(self, img, pool: str = "cls") -> torch.Tensor:
        """Encoder features of unmasked images: class token, mean of patch tokens, or both concatenated."""
        z, _ = self._full_image_tokens(img)
        f, cls = self.encode(z)
        if pool == "cls":
            return cls
        if pool == "mean":
            return f.mean(dim=1)
        if pool == "cls+mean":
            return torch.cat([cls, f.mean(dim=1)], dim=-1)
        raise ValueError(f"unknown pooling {pool!r}")

    def attention_maps(self, img) -> torch.Tensor:
        """Class-token attention of the last encoder layer, per head, on the patch grid.

        Returns (B, heads, g, g); the class token's weight on itself is dropped
        and the rest renormalized so every map sums to one.
        """
        if not len(self.blocks):
            raise DimensionError("attention maps need at least one encoder block")
        z, _ = self._full_image_tokens(img)
        _, _, attn = self.encode(z, return_attention=True)
        a = attn[:, :, 0, 1:]
        a = a / a.sum(dim=-1, keepdim=True)
        g = self.cfg.img_size // self.cfg.patch_size
        return a.reshape(a.shape[0], a.shape[1], g, g)


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


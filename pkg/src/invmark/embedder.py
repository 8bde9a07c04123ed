"""Watermark embedders: the dual cross-attention network and a convolutional baseline."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from invmark.errors import ShapeError
from invmark.tensor_core import (
    ChannelFC,
    Conv2d,
    ModelConfig,
    MultiHeadAttention,
    PositionalEmbedding,
    patchify,
    unpatchify,
)


def _check_inputs(cfg: ModelConfig, cover: torch.Tensor, wm: torch.Tensor) -> None:
    s, c, w = cfg.image_size, cfg.image_channels, cfg.wm_size
    if cover.dim() != 4 or tuple(cover.shape[1:]) != (s, s, c):
        raise ShapeError(f"cover must be (B, {s}, {s}, {c}), got {tuple(cover.shape)}")
    if wm.dim() != 3 or tuple(wm.shape[1:]) != (w, w) or wm.shape[0] != cover.shape[0]:
        raise ShapeError(f"watermark must be (B, {w}, {w}), got {tuple(wm.shape)}")


class CrossAttentionEmbedder(nn.Module):
    """Fuses cover patches and watermark cells through two cross-attention layers.

    Cover tokens attend to watermark tokens and vice versa; each attention output
    is added back onto its own branch, the two branches are concatenated per
    token and a channel-wise FC maps them back to cover patches.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        cdim, wdim = cfg.cover_token_dim, cfg.wm_embed_dim
        self.wm_proj = ChannelFC(cfg.wm_token_dim, wdim)
        self.cover_pos = PositionalEmbedding(cfg.cover_tokens, cdim)
        self.wm_pos = PositionalEmbedding(cfg.wm_tokens, wdim)
        self.cover_attn = MultiHeadAttention(cdim, wdim, cfg.attn_dim, cfg.heads, out_dim=cdim)
        self.wm_attn = MultiHeadAttention(wdim, cdim, cfg.attn_dim, cfg.heads, out_dim=wdim)
        self.fuse = ChannelFC(cdim + wdim, cdim)

    def fused_features(self, cover: torch.Tensor, wm: torch.Tensor) -> tuple[torch.Tensor, tuple]:
        _check_inputs(self.cfg, cover, wm)
        c_tok, grid = patchify(cover, self.cfg.patch_cover)
        w_tok, _ = patchify(wm.unsqueeze(-1), self.cfg.patch_wm)
        c = self.cover_pos(c_tok)
        w = self.wm_pos(self.wm_proj(w_tok))
        c2 = c + self.cover_attn(c, w)
        w2 = w + self.wm_attn(w, c)
        return torch.cat([c2, w2], dim=-1), grid

    def forward(self, cover: torch.Tensor, wm: torch.Tensor) -> torch.Tensor:
        feats, grid = self.fused_features(cover, wm)
        return unpatchify(self.fuse(feats), grid).clamp(0.0, 1.0)


class ConvEmbedder(nn.Module):
    """Baseline: nearest-upsampled watermark stacked on the cover, then same-padded convs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        in_ch = cfg.image_channels + 1
        for f in cfg.conv_baseline_filters:
            layers.append(Conv2d(in_ch, f, cfg.kernel))
            in_ch = f
        self.hidden = nn.ModuleList(layers)
        self.out = Conv2d(in_ch, cfg.image_channels, cfg.kernel)

    def forward(self, cover: torch.Tensor, wm: torch.Tensor) -> torch.Tensor:
        _check_inputs(self.cfg, cover, wm)
        scale = self.cfg.image_size // self.cfg.wm_size
        up = F.interpolate(wm.unsqueeze(1), scale_factor=scale, mode="nearest").permute(0, 2, 3, 1)
        x = torch.cat([cover, up.to(cover.dtype)], dim=-1)
        for conv in self.hidden:
            x = F.relu(conv(x))
        return self.out(x).clamp(0.0, 1.0)


def build_embedder(cfg: ModelConfig) -> nn.Module:
    return CrossAttentionEmbedder(cfg) if cfg.embedder == "cross" else ConvEmbedder(cfg)


def embed(cover: torch.Tensor, wm: torch.Tensor, embedder: nn.Module) -> torch.Tensor:
    """Embed a watermark; accepts single ``(H, W, C)``/``(8, 8)`` inputs or batches."""
    single = cover.dim() == 3
    if single:
        cover, wm = cover.unsqueeze(0), wm.unsqueeze(0)
    wm = wm.to(cover.dtype)
    out = embedder(cover, wm)
    return out[0] if single else out


def embedding_residual(cover, marked):
    """Absolute per-channel difference scaled by its maximum; all zeros when nothing changed."""
    cover = torch.as_tensor(cover)
    marked = torch.as_tensor(marked)
    if cover.shape != marked.shape:
        raise ShapeError(f"shape mismatch {tuple(cover.shape)} vs {tuple(marked.shape)}")
    diff = (marked.double() - cover.double()).abs()
    peak = diff.max()
    return diff if peak == 0 else diff / peak

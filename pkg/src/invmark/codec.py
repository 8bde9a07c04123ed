"""Encoder into the invariant domain and the decoder that projects it back to image shape."""

from __future__ import annotations

import torch
import torch.nn as nn

from invmark.errors import ShapeError
from invmark.tensor_core import (
    ChannelFC,
    ModelConfig,
    PositionalEmbedding,
    TransformerBlock,
    patch_grid,
    patchify,
    unpatchify,
)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = ChannelFC(cfg.cover_token_dim, cfg.attn_dim)
        self.pos = PositionalEmbedding(cfg.cover_tokens, cfg.attn_dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.attn_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.tf_blocks)
        )

    def forward(self, marked: torch.Tensor) -> torch.Tensor:
        s, c = self.cfg.image_size, self.cfg.image_channels
        if tuple(marked.shape[-3:]) != (s, s, c):
            raise ShapeError(f"encoder expects (..., {s}, {s}, {c}), got {tuple(marked.shape)}")
        tokens, _ = patchify(marked, self.cfg.patch_cover)
        x = self.pos(self.proj(tokens))
        for block in self.blocks:
            x = block(x)
        return x


class Decoder(nn.Module):
    """Mirror of the encoder.  Output is left unclamped; it only feeds the extractor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.attn_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.tf_blocks)
        )
        self.proj = ChannelFC(cfg.attn_dim, cfg.cover_token_dim)
        self.grid = patch_grid(cfg.image_size, cfg.image_size, cfg.image_channels, cfg.patch_cover)

    def forward(self, domain: torch.Tensor) -> torch.Tensor:
        want = (self.cfg.cover_tokens, self.cfg.attn_dim)
        if tuple(domain.shape[-2:]) != want:
            raise ShapeError(f"decoder expects (..., {want[0]}, {want[1]}), got {tuple(domain.shape)}")
        x = domain
        for block in self.blocks:
            x = block(x)
        return unpatchify(self.proj(x), self.grid)


def encode(marked: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(marked)


def decode(domain: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    return decoder(domain)

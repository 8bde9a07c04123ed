"""Convolutional watermark extractor."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from invmark.errors import ShapeError
from invmark.tensor_core import ChannelFC, Conv2d, ModelConfig, dropout, space_to_depth

BIT_THRESHOLD = 0.5


class Extractor(nn.Module):
    """Maps a ``(B, S, S, C)`` image to ``(B, w, w)`` real-valued bit estimates.

    The image is first folded losslessly to the watermark grid (space-to-depth)
    and squeezed to ``extractor_in_channels`` by a learned 1x1 conv.  Dropout
    follows each expansion conv in train mode only.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        block = cfg.extractor_block
        self.entry = Conv2d(block * block * cfg.image_channels, cfg.extractor_in_channels, 1)
        ch = cfg.extractor_in_channels
        expand = []
        for f in cfg.extractor_expand:
            expand.append(Conv2d(ch, f, cfg.kernel))
            ch = f
        self.expand = nn.ModuleList(expand)
        self.fc = ChannelFC(ch, cfg.extractor_fc)
        ch = cfg.extractor_fc
        reduce = []
        for f in cfg.extractor_reduce:
            reduce.append(Conv2d(ch, f, cfg.kernel))
            ch = f
        self.reduce = nn.ModuleList(reduce)

    def forward(self, x: torch.Tensor, training: bool = False, generator: torch.Generator | None = None):
        s, c = self.cfg.image_size, self.cfg.image_channels
        if x.dim() != 4 or tuple(x.shape[1:]) != (s, s, c):
            raise ShapeError(f"extractor expects (B, {s}, {s}, {c}), got {tuple(x.shape)}")
        h = self.entry(space_to_depth(x, self.cfg.extractor_block))
        for conv in self.expand:
            h = dropout(F.relu(conv(h)), self.cfg.dropout_rate, training, generator)
        h = F.relu(self.fc(h))
        for conv in self.reduce[:-1]:
            h = F.relu(conv(h))
        return self.reduce[-1](h).squeeze(-1)


def extract_logits(x, extractor: Extractor, mode: str = "eval", generator=None) -> torch.Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    single = x.dim() == 3
    out = extractor(x.unsqueeze(0) if single else x, training=mode == "train", generator=generator)
    return out[0] if single else out


def threshold_bits(logits: torch.Tensor) -> torch.Tensor:
    return (logits >= BIT_THRESHOLD).to(torch.uint8)


@torch.no_grad()
def extract_bits(x, extractor: Extractor) -> torch.Tensor:
    return threshold_bits(extract_logits(x, extractor, "eval"))

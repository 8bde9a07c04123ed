"""Shape-checked building blocks shared by every network in the toolkit.

Images are channels-last tensors with values in [0, 1]: ``(H, W, C)`` or a
batch ``(B, H, W, C)``.  Token sequences are ``(..., N, D)``.  Patch tokens are
laid out row-major over the patch grid and, inside each patch, row-major over
pixels with the channel index varying fastest.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from invmark.errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    image_channels: int = 3
    wm_size: int = 8
    patch_cover: int = 16
    patch_wm: int = 1
    attn_dim: int = 512
    heads: int = 2
    tf_blocks: int = 4
    dropout_rate: float = 0.20
    wm_embed_dim: int = 16
    mlp_ratio: int = 2
    extractor_in_channels: int = 48
    extractor_expand: tuple[int, ...] = (64, 128, 256)
    extractor_fc: int = 512
    extractor_reduce: tuple[int, ...] = (128, 64, 32, 8, 1)
    conv_baseline_filters: tuple[int, ...] = (64, 64)
    kernel: int = 3
    embedder: str = "cross"

    def __post_init__(self):
        # tuples survive a JSON/YAML round trip as lists
        for name in ("extractor_expand", "extractor_reduce", "conv_baseline_filters"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if min(self.image_size, self.image_channels, self.wm_size, self.patch_cover, self.patch_wm) <= 0:
            raise ConfigError("sizes must be positive")
        if self.image_size % self.patch_cover:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_cover {self.patch_cover}")
        if self.wm_size % self.patch_wm:
            raise ConfigError(f"wm_size {self.wm_size} not divisible by patch_wm {self.patch_wm}")
        if self.attn_dim % self.heads:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by heads {self.heads}")
        if self.cover_tokens != self.wm_tokens:
            raise ConfigError(
                f"cover and watermark token counts differ ({self.cover_tokens} vs {self.wm_tokens})"
            )
        if self.image_size % self.wm_size:
            raise ConfigError("image_size must be a multiple of wm_size for the extractor projection")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if not self.extractor_reduce or self.extractor_reduce[-1] != 1:
            raise ConfigError("extractor_reduce must end with a single filter")
        if self.embedder not in ("cross", "conv"):
            raise ConfigError(f"unknown embedder kind {self.embedder!r}")

    @property
    def cover_tokens(self) -> int:
        return (self.image_size // self.patch_cover) ** 2

    @property
    def wm_tokens(self) -> int:
        return (self.wm_size // self.patch_wm) ** 2

    @property
    def cover_token_dim(self) -> int:
        return self.patch_cover**2 * self.image_channels

    @property
    def wm_token_dim(self) -> int:
        return self.patch_wm**2

    @property
    def extractor_block(self) -> int:
        return self.image_size // self.wm_size

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- patches


class PatchGrid(NamedTuple):
    rows: int
    cols: int
    patch: int
    channels: int


def patch_grid(height: int, width: int, channels: int, patch: int) -> PatchGrid:
    if patch <= 0 or height % patch or width % patch:
        raise ShapeError(f"{height}x{width} image not divisible into {patch}x{patch} patches")
    return PatchGrid(height // patch, width // patch, patch, channels)


def patchify(img: torch.Tensor, patch: int) -> tuple[torch.Tensor, PatchGrid]:
    """Split ``(..., H, W, C)`` into ``(..., N, patch*patch*C)`` tokens plus the grid needed to undo it."""
    if img.dim() < 3:
        raise ShapeError(f"expected (..., H, W, C), got shape {tuple(img.shape)}")
    *lead, h, w, c = img.shape
    grid = patch_grid(h, w, c, patch)
    x = img.reshape(*lead, grid.rows, patch, grid.cols, patch, c)
    n = len(lead)
    # (..., rows, cols, p, p, c)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, grid.rows * grid.cols, patch * patch * c), grid


def unpatchify(tokens: torch.Tensor, grid: PatchGrid | None) -> torch.Tensor:
    if grid is None:
        raise ShapeError("token sequence carries no patch grid")
    rows, cols, p, c = grid
    if tokens.dim() < 2 or tokens.shape[-2] != rows * cols or tokens.shape[-1] != p * p * c:
        raise ShapeError(f"tokens {tuple(tokens.shape)} do not match grid {tuple(grid)}")
    lead = tokens.shape[:-2]
    n = len(lead)
    x = tokens.reshape(*lead, rows, cols, p, p, c)
    x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, rows * p, cols * p, c)


def space_to_depth(img: torch.Tensor, block: int) -> torch.Tensor:
    """``(..., H, W, C)`` -> ``(..., H/block, W/block, block*block*C)`` using the patch layout."""
    tokens, grid = patchify(img, block)
    return tokens.reshape(*tokens.shape[:-2], grid.rows, grid.cols, tokens.shape[-1])


# ---------------------------------------------------------------- layers


class PositionalEmbedding(nn.Module):
    """Learned additive per-token table."""

    def __init__(self, tokens: int, dim: int):
        super().__init__()
        self.table = nn.Parameter(torch.zeros(tokens, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return add_positional(x, self.table)


def add_positional(tokens: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if tuple(tokens.shape[-2:]) != tuple(table.shape):
        raise ShapeError(f"positional table {tuple(table.shape)} vs tokens {tuple(tokens.shape)}")
    return tokens + table


class ChannelFC(nn.Linear):
    """The same affine map applied to every token independently."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"expected {self.in_features} channels, got {x.shape[-1]}")
        return super().forward(x)


def _check_finite(*tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError("non-finite values in attention input")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with independent query and key/value sources.

    Queries come from a ``q_dim`` sequence, keys and values from a ``kv_dim``
    sequence; both are projected to ``inner_dim`` split across ``heads``, and the
    merged heads are projected to ``out_dim``.
    """

    def __init__(self, q_dim: int, kv_dim: int, inner_dim: int, heads: int, out_dim: int | None = None):
        super().__init__()
        if inner_dim % heads:
            raise ConfigError(f"inner_dim {inner_dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = inner_dim // heads
        self.to_q = nn.Linear(q_dim, inner_dim)
        self.to_k = nn.Linear(kv_dim, inner_dim)
        self.to_v = nn.Linear(kv_dim, inner_dim)
        self.to_out = nn.Linear(inner_dim, out_dim if out_dim is not None else q_dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.head_dim).transpose(-3, -2)

    def attention_weights(self, q_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        """Per-head softmax weights, shape ``(..., heads, Nq, Nkv)``."""
        if q_src.shape[-1] != self.to_q.in_features or kv_src.shape[-1] != self.to_k.in_features:
            raise ShapeError("attention input widths do not match the projections")
        _check_finite(q_src, kv_src)
        q = self._split(self.to_q(q_src))
        k = self._split(self.to_k(kv_src))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=-1)

    def forward(self, q_src: torch.Tensor, kv_src: torch.Tensor) -> torch.Tensor:
        attn = self.attention_weights(q_src, kv_src)
        v = self._split(self.to_v(kv_src))
        out = (attn @ v).transpose(-3, -2)
        out = out.reshape(*out.shape[:-2], self.heads * self.head_dim)
        return self.to_out(out)


def multi_head_attention(q_src, kv_src, params: MultiHeadAttention) -> torch.Tensor:
    return params(q_src, kv_src)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention and MLP sublayers, each with a residual connection."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ShapeError(f"block width {self.dim}, input width {x.shape[-1]}")
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def _check_rate(rate: float) -> None:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")


def dropout(x: torch.Tensor, rate: float, training: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout driven by an explicit generator; identity in eval mode."""
    _check_rate(rate)
    if not training or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


class Conv2d(nn.Conv2d):
    """Same-padded convolution over channels-last ``(B, H, W, C)`` images."""

    def __init__(self, in_channels: int, filters: int, kernel: int):
        if kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd for same padding, got {kernel}")
        super().__init__(in_channels, filters, kernel, padding=kernel // 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[-1] != self.in_channels:
            raise ShapeError(f"expected (B, H, W, {self.in_channels}), got {tuple(x.shape)}")
        y = super().forward(x.permute(0, 3, 1, 2))
        return y.permute(0, 2, 3, 1)


# ---------------------------------------------------------------- parameters


def init_parameters(module: nn.Module, generator: torch.Generator, pos_std: float = 0.02) -> None:
    """Fan-in scaled zero-mean weights, zero biases, small-noise positional tables."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, PositionalEmbedding):
                m.table.copy_(torch.randn(m.table.shape, generator=generator) * pos_std)


def set_trainable(module: nn.Module, trainable: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(trainable)


def parameter_digest(module: nn.Module) -> str:
    """sha256 over names and raw bytes of every tensor in the state dict."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ParameterSummary:
    trainable: dict[str, tuple[int, ...]] = field(default_factory=dict)
    frozen: dict[str, tuple[int, ...]] = field(default_factory=dict)


def summarize_parameters(module: nn.Module) -> ParameterSummary:
    s = ParameterSummary()
    for name, p in module.named_parameters():
        (s.trainable if p.requires_grad else s.frozen)[name] = tuple(p.shape)
    return s

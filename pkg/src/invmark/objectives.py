"""Training losses and evaluation metrics (PSNR, bit recovery rate)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from invmark.errors import ConfigError, DomainError, ShapeError


@dataclass(frozen=True)
class TrainingLossConfig:
    margin: float = 1.0
    triplet_weight: float = 0.0

    def __post_init__(self):
        if self.margin < 0 or self.triplet_weight < 0:
            raise ConfigError("margin and triplet_weight must be nonnegative")


def _same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return ((a - b) ** 2).mean()


def embedder_loss(cover, marked):
    return mse(cover, marked)


def extractor_pretrain_loss(wm, wm_extracted):
    if tuple(wm.shape[-2:]) != tuple(wm_extracted.shape[-2:]):
        raise ShapeError("watermark grids differ in shape")
    return mse(wm.to(wm_extracted.dtype), wm_extracted)


def token_distance(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """MSE over the last two axes (tokens x channels), keeping any batch axes."""
    _same_shape(x, y)
    return ((x - y) ** 2).mean(dim=(-2, -1))


def triplet_loss(anchor, positive, negative, margin: float = 1.0) -> torch.Tensor:
    """Hinge on the anchor-positive vs anchor-negative distance gap, averaged over the batch."""
    if margin < 0:
        raise ConfigError(f"margin must be nonnegative, got {margin}")
    _same_shape(anchor, negative)
    gap = token_distance(anchor, positive) - token_distance(anchor, negative) + margin
    return torch.clamp(gap, min=0.0).mean()


def extractor_final_loss(originals, extracted) -> torch.Tensor:
    """Sum of the three per-member MSEs of an (anchor, positive, negative) triplet."""
    if len(originals) != 3 or len(extracted) != 3:
        raise ShapeError("expected three originals and three extracted watermarks")
    total = 0.0
    for w, we in zip(originals, extracted):
        total = total + extractor_pretrain_loss(w, we)
    return total


# ---------------------------------------------------------------- metrics


def to_uint8(img) -> np.ndarray:
    arr = img.detach().cpu().double().numpy() if isinstance(img, torch.Tensor) else np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def psnr(a, b) -> float:
    """PSNR in dB between two unit-range images after quantizing both to 8 bits."""
    qa, qb = to_uint8(a), to_uint8(b)
    _same_shape(qa, qb)
    err = np.mean((qa.astype(np.float64) - qb.astype(np.float64)) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / err)


def _bits(w) -> np.ndarray:
    arr = w.detach().cpu().numpy() if isinstance(w, torch.Tensor) else np.asarray(w)
    if not np.isin(arr, (0, 1)).all():
        raise DomainError("watermark contains non-binary values")
    return arr.astype(np.uint8)


def matching_bits(w, w_hat) -> int:
    a, b = _bits(w), _bits(w_hat)
    _same_shape(a, b)
    return int((a == b).sum())


def brr(w, w_hat) -> float:
    """Bit recovery rate in percent."""
    a = _bits(w)
    return 100.0 * matching_bits(a, w_hat) / a.size


# ---------------------------------------------------------------- reports


@dataclass
class NoiseResult:
    noise: str
    level: float | None
    brr_percent: float
    psnr_db: float
    n_images: int


@dataclass
class MetricReport:
    """Aggregate results.  BRR pools all bits over the dataset before taking the percentage."""

    psnr_db: float
    brr_percent: float
    n_images: int
    entries: list[NoiseResult] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psnr_db"] = json_float(self.psnr_db)
        for e in d["entries"]:
            e["psnr_db"] = json_float(e["psnr_db"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def rows(self) -> list[dict]:
        out = [dict(noise="none", level="", brr_percent=self.brr_percent, psnr_db=self.psnr_db, n_images=self.n_images)]
        for e in self.entries:
            out.append(dict(
                noise=e.noise,
                level="" if e.level is None else e.level,
                brr_percent=e.brr_percent,
                psnr_db=e.psnr_db,
                n_images=e.n_images,
            ))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            row["psnr_db"] = "inf" if row["psnr_db"] == math.inf else row["psnr_db"]
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        entries = [NoiseResult(**{**e, "psnr_db": _fromjson_float(e["psnr_db"])}) for e in d.get("entries", [])]
        return cls(
            psnr_db=_fromjson_float(d["psnr_db"]),
            brr_percent=d["brr_percent"],
            n_images=d["n_images"],
            entries=entries,
            meta=d.get("meta", {}),
        )


CSV_FIELDS = ["noise", "level", "brr_percent", "psnr_db", "n_images"]


def json_float(x: float):
    # JSON has no infinity; identical images are reported as the string "inf"
    return "inf" if x == math.inf else x


def _fromjson_float(x) -> float:
    return math.inf if x == "inf" else float(x)

"""Training noises, testing attacks, and the compound augmentation used to build positives.

All operations take and return ``(H, W, C)`` float arrays in [0, 1] and draw
randomness only from the ``numpy.random.Generator`` they are given.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image
from scipy.ndimage import gaussian_filter

from invmark.errors import ConfigError

TRAIN_NOISES = ("hflip", "gaussian_blur", "solarize", "brightness", "contrast", "hue", "saturation")
TEST_NOISES = ("crop", "cutout", "jpeg", "hist_eq", "salt_pepper", "gaussian_noise")
NOISES = TRAIN_NOISES + TEST_NOISES

ALIASES = {
    "blur": "gaussian_blur",
    "flip": "hflip",
    "sp": "salt_pepper",
    "s&p": "salt_pepper",
    "gn": "gaussian_noise",
    "noise": "gaussian_noise",
    "he": "hist_eq",
    "histeq": "hist_eq",
}

# (low, high) closed domain of each noise's level
LEVEL_DOMAIN = {
    "hflip": (0.0, 1.0),
    "gaussian_blur": (0.0, 20.0),
    "solarize": (0.0, 1.0),
    "brightness": (0.0, 10.0),
    "contrast": (0.0, 10.0),
    "hue": (-0.5, 0.5),
    "saturation": (0.0, 10.0),
    "crop": (0.0, 0.95),
    "cutout": (0.0, 1.0),
    "jpeg": (1.0, 100.0),
    "hist_eq": (0.0, 0.0),
    "salt_pepper": (0.0, 1.0),
    "gaussian_noise": (0.0, 1.0),
}

# Escalating attack levels, ordered from mild to severe.  Severity grows with
# the level except for solarize, where a lower threshold inverts more pixels,
# and jpeg, where lower quality is harsher.
SWEEP_LEVELS = {
    "jpeg": (90.0, 50.0, 10.0),
    "cutout": (0.1, 0.2, 0.4),
    "salt_pepper": (0.01, 0.05, 0.1),
    "gaussian_blur": (0.5, 1.0, 2.0),
    "gaussian_noise": (0.02, 0.06, 0.1),
    "hue": (0.1, 0.2, 0.25),
    "brightness": (1.25, 1.5, 2.0),
    "contrast": (1.25, 1.5, 2.0),
    "saturation": (1.5, 2.0, 3.0),
    "crop": (0.1, 0.2, 0.4),
    "solarize": (0.75, 0.5, 0.25),
    "hflip": (1.0,),
    "hist_eq": (0.0,),
}

# direction in which each noise's level becomes more severe
SEVERITY_SIGN = {name: 1 for name in NOISES} | {"jpeg": -1, "solarize": -1}


def canonical_name(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in NOISES:
        raise ConfigError(f"unknown noise {name!r}; known: {', '.join(NOISES)}")
    return key


def role_of(name: str) -> str:
    return "train" if canonical_name(name) in TRAIN_NOISES else "test"


@dataclass(frozen=True)
class NoiseSpec:
    name: str
    level: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "name", canonical_name(self.name))
        level = float(self.level)
        lo, hi = LEVEL_DOMAIN[self.name]
        if self.name == "hist_eq":
            level = 0.0
        elif not lo <= level <= hi or math.isnan(level):
            raise ConfigError(f"{self.name} level {level} outside [{lo}, {hi}]")
        object.__setattr__(self, "level", level)

    @property
    def role(self) -> str:
        return role_of(self.name)

    @classmethod
    def parse(cls, text: str) -> "NoiseSpec":
        """Parse ``name:level`` (``name`` alone for parameterless attacks)."""
        name, _, level = text.partition(":")
        if not level:
            if canonical_name(name) != "hist_eq" and canonical_name(name) != "hflip":
                raise ConfigError(f"noise {text!r} needs a level, e.g. {name}:0.5")
            level = "1" if canonical_name(name) == "hflip" else "0"
        try:
            return cls(name, float(level))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad level in {text!r}") from exc

    def __str__(self) -> str:
        return self.name if self.name == "hist_eq" else f"{self.name}:{self.level:g}"


def attack_sweep_levels(name: str) -> list[float]:
    return list(SWEEP_LEVELS[canonical_name(name)])


# ---------------------------------------------------------------- noises

_LUMA = np.array([0.299, 0.587, 0.114])


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[-1] == 1:
        return img[..., 0]
    return img @ _LUMA


def _hflip(img, level, rng):
    return img[:, ::-1].copy() if level > 0 else img


def _blur(img, sigma, rng):
    if sigma == 0:
        return img
    return gaussian_filter(img, sigma=(sigma, sigma, 0), truncate=4.0, mode="reflect")


def _solarize(img, threshold, rng):
    return np.where(img >= threshold, 1.0 - img, img)


def _brightness(img, factor, rng):
    return img if factor == 1.0 else img * factor


def _contrast(img, factor, rng):
    if factor == 1.0:
        return img
    mean = _gray(img).mean()
    return (img - mean) * factor + mean


def _saturation(img, factor, rng):
    if factor == 1.0 or img.shape[-1] != 3:
        return img
    gray = _gray(img)[..., None]
    return gray + (img - gray) * factor


def _hue(img, shift, rng):
    if shift == 0 or img.shape[-1] != 3:
        return img
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv)


def _resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _crop(img, level, rng):
    if level == 0:
        return img
    h, w = img.shape[:2]
    ch = max(1, int(round(h * (1.0 - level))))
    cw = max(1, int(round(w * (1.0 - level))))
    top, left = (h - ch) // 2, (w - cw) // 2
    return _resize(img[top:top + ch, left:left + cw], h, w)


def _cutout(img, area, rng):
    if area == 0:
        return img
    h, w = img.shape[:2]
    side_h = min(h, int(round(math.sqrt(area) * h)))
    side_w = min(w, int(round(math.sqrt(area) * w)))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    out = img.copy()
    out[top:top + side_h, left:left + side_w] = 0.0
    return out


def _jpeg(img, quality, rng):
    q8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    pil = Image.fromarray(q8[..., 0] if q8.shape[-1] == 1 else q8)
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=int(round(quality)))
    buf.seek(0)
    out = np.asarray(Image.open(buf), dtype=np.float64) / 255.0
    return out.reshape(img.shape)


def _hist_eq(img, level, rng):
    """Equalize the 8-bit luminance histogram and shift RGB onto the new luminance."""
    y = _gray(img)
    y8 = np.clip(np.rint(y * 255.0), 0, 255).astype(np.int64)
    hist = np.bincount(y8.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    nonzero = cdf[hist > 0]
    cdf_min = nonzero[0]
    total = y8.size
    if total == cdf_min:
        return img
    lut = np.clip(np.rint((cdf - cdf_min) / (total - cdf_min) * 255.0), 0, 255) / 255.0
    y_new = lut[y8]
    if img.shape[-1] == 1:
        return y_new[..., None]
    # adding the same offset to R, G and B moves Y and leaves Cb/Cr unchanged
    return img + (y_new - y)[..., None]


def _salt_pepper(img, amount, rng):
    if amount == 0:
        return img
    u = rng.random(img.shape)
    out = img.copy()
    out[u < amount / 2] = 0.0
    out[(u >= amount / 2) & (u < amount)] = 1.0
    return out


def _gaussian_noise(img, std, rng):
    if std == 0:
        return img
    return img + rng.normal(0.0, std, size=img.shape)


_APPLY = {
    "hflip": _hflip,
    "gaussian_blur": _blur,
    "solarize": _solarize,
    "brightness": _brightness,
    "contrast": _contrast,
    "hue": _hue,
    "saturation": _saturation,
    "crop": _crop,
    "cutout": _cutout,
    "jpeg": _jpeg,
    "hist_eq": _hist_eq,
    "salt_pepper": _salt_pepper,
    "gaussian_noise": _gaussian_noise,
}


def apply_noise(img: np.ndarray, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    out = _APPLY[spec.name](img, spec.level, rng)
    if out is img:
        return img.copy()
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- compound


DEFAULT_RANGES = {
    "hflip": (1.0, 1.0),
    "gaussian_blur": (0.1, 2.0),
    "solarize": (0.25, 0.75),
    "brightness": (0.5, 2.0),
    "contrast": (0.5, 2.0),
    "hue": (-0.25, 0.25),
    "saturation": (0.5, 2.0),
}


@dataclass
class CompoundAugmentConfig:
    probabilities: dict[str, float] = field(default_factory=lambda: {n: 0.5 for n in TRAIN_NOISES})
    ranges: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    seed: int = 0

    def __post_init__(self):
        self.probabilities = {canonical_name(k): float(v) for k, v in self.probabilities.items()}
        self.ranges = {canonical_name(k): (float(v[0]), float(v[1])) for k, v in self.ranges.items()}
        self.validate()

    def validate(self) -> None:
        for name in (*self.probabilities, *self.ranges):
            if role_of(name) != "train":
                raise ConfigError(f"{name} is a test-role attack and cannot be used for training augmentation")
        for name, p in self.probabilities.items():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"inclusion probability for {name} must be in [0, 1], got {p}")
        for name, (lo, hi) in self.ranges.items():
            if lo > hi:
                raise ConfigError(f"empty level range for {name}: {lo} > {hi}")
            NoiseSpec(name, lo), NoiseSpec(name, hi)

    @classmethod
    def disabled(cls, seed: int = 0) -> "CompoundAugmentConfig":
        return cls(probabilities={n: 0.0 for n in TRAIN_NOISES}, seed=seed)

    def to_dict(self) -> dict:
        return {
            "probabilities": dict(self.probabilities),
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "seed": self.seed,
        }


def compound_augment(img: np.ndarray, cfg: CompoundAugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Walk the training noises in fixed order, applying each with its inclusion probability."""
    cfg.validate()
    out = np.asarray(img, dtype=np.float64)
    for name in TRAIN_NOISES:
        p = cfg.probabilities.get(name, 0.0)
        lo, hi = cfg.ranges.get(name, DEFAULT_RANGES[name])
        include = rng.random() < p
        level = rng.uniform(lo, hi)
        if include:
            out = apply_noise(out, NoiseSpec(name, level), rng)
    return out.copy() if out is img else out


def augment_batch(images: torch.Tensor, cfg: CompoundAugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """Compound-augment each image of a ``(B, H, W, C)`` tensor; no gradient flows through."""
    arr = images.detach().cpu().double().numpy()
    out = np.stack([compound_augment(x, cfg, rng) for x in arr])
    return torch.from_numpy(out).to(images.dtype)


def attack_batch(images: torch.Tensor, spec: NoiseSpec, rng: np.random.Generator) -> torch.Tensor:
    arr = images.detach().cpu().double().numpy()
    out = np.stack([apply_noise(x, spec, rng) for x in arr])
    return torch.from_numpy(out).to(images.dtype)

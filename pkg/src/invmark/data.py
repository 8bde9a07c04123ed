"""Image ingestion, watermark generation and the bundled desk-scale toy dataset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from invmark.errors import ConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".webp")


@dataclass
class DatasetSpec:
    image_dir: str
    train_size: int | None = None
    test_size: int = 0
    image_size: int = 128
    shuffle_seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ImageSet:
    train: np.ndarray
    test: np.ndarray
    train_names: list[str] = field(default_factory=list)
    test_names: list[str] = field(default_factory=list)
    skipped: int = 0


def to_unit(arr8: np.ndarray) -> np.ndarray:
    return arr8.astype(np.float32) / 255.0


def to_8bit(img) -> np.ndarray:
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_image(path, size: int | None = None) -> np.ndarray:
    """Decode to an ``(H, W, 3)`` unit-range float32 array; grayscale is replicated to RGB."""
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "I", "I;16", "F", "1"):
            im = im.convert("L")
        elif im.mode != "RGB":
            im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return to_unit(arr)


def save_image(img, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_8bit(img)).save(path)
    return path


def ingest_images(spec: DatasetSpec) -> ImageSet:
    root = Path(spec.image_dir)
    if not root.is_dir():
        raise ConfigError(f"image directory not found: {root}")
    files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    order = np.random.default_rng(spec.shuffle_seed).permutation(len(files))
    images, names, skipped = [], [], 0
    for i in order:
        try:
            images.append(load_image(files[i], spec.image_size))
            names.append(str(files[i].relative_to(root)))
        except (UnidentifiedImageError, OSError) as exc:
            skipped += 1
            log.warning("skipping undecodable image %s: %s", files[i], exc)
    if not images:
        raise ConfigError(f"no decodable images in {root}")
    n_train = len(images) - spec.test_size if spec.train_size is None else spec.train_size
    if n_train <= 0 or n_train + spec.test_size > len(images):
        raise ConfigError(f"cannot split {len(images)} images into {spec.train_size} train / {spec.test_size} test")
    stack = np.stack(images)
    return ImageSet(
        train=stack[:n_train],
        test=stack[n_train:n_train + spec.test_size],
        train_names=names[:n_train],
        test_names=names[n_train:n_train + spec.test_size],
        skipped=skipped,
    )


# ---------------------------------------------------------------- watermarks


def generate_watermark(img, wm_size: int = 8, rng=None) -> np.ndarray:
    """Bilinear downscale to ``wm_size`` squared, 8-bit luminance, threshold at 128.

    ``rng`` is accepted for interface symmetry; the mapping is deterministic.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    t = torch.from_numpy(arr).permute(2, 0, 1)[None]
    small = F.interpolate(t, size=(wm_size, wm_size), mode="bilinear", align_corners=False)[0]
    small = small.permute(1, 2, 0).numpy()
    luma = small[..., 0] if small.shape[-1] == 1 else small @ np.array([0.299, 0.587, 0.114])
    y8 = np.clip(np.rint(luma * 255.0), 0, 255)
    return (y8 >= 128).astype(np.uint8)


def assign_watermarks(images: np.ndarray, rng: np.random.Generator, wm_size: int = 8) -> np.ndarray:
    """Give every image the binarized thumbnail of a randomly chosen image from the same set."""
    source = rng.permutation(len(images))
    return np.stack([generate_watermark(images[j], wm_size) for j in source])


def wm_to_hex(bits) -> str:
    flat = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if flat.size % 4:
        raise ValueError("bit count must be a multiple of 4")
    value = 0
    for b in flat:
        value = (value << 1) | int(b)
    return f"{value:0{flat.size // 4}X}"


def hex_to_wm(text: str, wm_size: int = 8) -> np.ndarray:
    """Parse row-major, MSB-first hex (16 digits for 64 bits)."""
    digits = wm_size * wm_size // 4
    text = text.strip()
    if text.lower().startswith("0x"):
        text = text[2:]
    if len(text) != digits or any(c not in "0123456789abcdefABCDEF" for c in text):
        raise ConfigError(f"watermark must be exactly {digits} hex digits, got {text!r}")
    value = int(text, 16)
    bits = [(value >> (wm_size * wm_size - 1 - i)) & 1 for i in range(wm_size * wm_size)]
    return np.array(bits, dtype=np.uint8).reshape(wm_size, wm_size)


# ---------------------------------------------------------------- toy data

TOY_TRAIN = (
    "astronaut.png", "coffee.png", "chelsea.png", "rocket.jpg",
    "ihc.png", "hubble_deep_field.jpg", "retina.jpg", "color.png",
)
TOY_HELDOUT = (
    "camera.png", "coins.png", "motorcycle_left.png", "motorcycle_right.png",
    "moon.png", "brick.png", "gravel.png", "logo.png",
)


def write_toy_dataset(out_dir, size: int = 128) -> tuple[Path, Path]:
    """Resize scikit-image's bundled sample photos into ``train/`` (8) and ``heldout/`` (8) folders."""
    import skimage.data

    src = Path(skimage.data.__file__).parent
    out = Path(out_dir)
    dirs = []
    for sub, names in (("train", TOY_TRAIN), ("heldout", TOY_HELDOUT)):
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        for name in names:
            path = src / name
            if not path.is_file():
                raise ConfigError(f"bundled sample image missing: {path}")
            square = Image.fromarray(to_8bit(_center_square(load_image(path))))
            square.resize((size, size), Image.BILINEAR).save(d / (Path(name).stem + ".png"))
        dirs.append(d)
    return dirs[0], dirs[1]


def _center_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return img[top:top + s, left:left + s]


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled each epoch; short tails are dropped."""
    batch_size = min(batch_size, n)
    per_epoch = max(1, math.floor(n / batch_size))
    while True:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            yield perm[b * batch_size:(b + 1) * batch_size]

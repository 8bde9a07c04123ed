"""Versioned single-file checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes   b"INVMARK\\x00"
    version    uint32    FORMAT_VERSION
    length     uint64    byte length of the manifest
    manifest   JSON      utf-8, see below
    payload    bytes     arrays back to back, row-major, little-endian

The manifest holds ``format_version``, ``model_config``, ``stage``,
``rng_state``, ``metrics``, ``meta`` and ``tensors``: a list of
``{name, dtype, shape, offset, nbytes}`` records whose offsets are relative
to the start of the payload.  Parameters are stored as ``<f4``; the torch
generator state is stored as ``|u1``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from invmark.errors import CheckpointError
from invmark.tensor_core import ModelConfig

MAGIC = b"INVMARK\x00"
FORMAT_VERSION = 1
STAGES = ("init", "stage1", "stage2", "stage3")
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "|u1": np.uint8, "<i8": np.int64}


@dataclass
class Checkpoint:
    model_config: ModelConfig
    stage: str
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")

    def networks(self) -> set[str]:
        return {name.split(".", 1)[0] for name in self.tensors}

    def put_module(self, prefix: str, module: nn.Module) -> None:
        for name, t in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy().copy()

    def load_module(self, prefix: str, module: nn.Module) -> nn.Module:
        want = {k[len(prefix) + 1:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}
        if not want:
            raise CheckpointError(f"checkpoint ({self.stage}) has no {prefix} parameters")
        current = module.state_dict()
        if set(want) != set(current):
            raise CheckpointError(f"{prefix} parameter names do not match the configured architecture")
        for k, v in want.items():
            if tuple(current[k].shape) != v.shape:
                raise CheckpointError(f"{prefix}.{k}: shape {v.shape} vs configured {tuple(current[k].shape)}")
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in want.items()})
        return module

    def drop(self, prefix: str) -> None:
        for k in [k for k in self.tensors if k.startswith(prefix + ".")]:
            del self.tensors[k]


def _dtype_tag(arr: np.ndarray) -> str:
    tag = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder not in ("|",) else arr.dtype.str
    if tag not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return tag


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    records, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        tag = _dtype_tag(arr)
        raw = arr.astype(np.dtype(tag), copy=False).tobytes(order="C")
        records.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "stage": ckpt.stage,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
        "meta": ckpt.meta,
        "tensors": records,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)
    return path


def read_manifest(path) -> tuple[dict, int]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version, length = struct.unpack("<IQ", f.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        try:
            manifest = json.loads(f.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest in {path}") from exc
    return manifest, 20 + length


def load_checkpoint(path) -> Checkpoint:
    manifest, start = read_manifest(path)
    data = Path(path).read_bytes()[start:]
    tensors = {}
    for rec in manifest["tensors"]:
        lo, hi = rec["offset"], rec["offset"] + rec["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated checkpoint: {rec['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(_DTYPES[rec["dtype"]]).copy()
    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        stage=manifest["stage"],
        tensors=tensors,
        rng_state=manifest["rng_state"],
        metrics=manifest["metrics"],
        meta=manifest["meta"],
    )

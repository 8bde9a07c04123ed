"""YAML run configuration: model, training, augmentation, data and evaluation sections.

Every section rejects unknown keys.  The effective configuration (defaults
filled in) is written next to each run's outputs.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from invmark.augmentation import NOISES, CompoundAugmentConfig, NoiseSpec, attack_sweep_levels
from invmark.data import DatasetSpec
from invmark.errors import ConfigError
from invmark.tensor_core import ModelConfig
from invmark.training import TrainingConfig

SECTIONS = ("model", "training", "augment", "data", "eval")


@dataclass
class EvalConfig:
    noises: list[str] = field(default_factory=list)
    heldout_dir: str | None = None
    seed: int = 0
    repeats: int = 4

    def specs(self) -> list[NoiseSpec]:
        return parse_noises(self.noises)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    augment: CompoundAugmentConfig = field(default_factory=CompoundAugmentConfig)
    data: DatasetSpec | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "augment": self.augment.to_dict(),
            "data": None if self.data is None else self.data.to_dict(),
            "eval": dict(self.eval.__dict__),
        }

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


# Desk-scale profile: the full architecture on a handful of 128x128 images,
# single CPU core.  A larger learning rate with faster decay and gradient
# clipping replaces the long low-rate schedule.
DESK = {
    "training": {
        "lr": 1e-3, "lr_decay": 0.9, "epoch_steps": 250, "batch_size": 8, "grad_clip": 1.0,
        "stage1_steps": 4000, "stage2_steps": 300, "stage3_steps": 1000, "log_every": 100,
    },
}
PRESETS = {"full": {}, "desk": DESK}


def _section(cls, data, name: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(raw: dict | None = None, preset: str = "full") -> RunConfig:
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    raw = dict(raw or {})
    unknown = set(raw) - set(SECTIONS) - {"preset"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    preset = raw.pop("preset", preset)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], raw)
    model = merged.get("model") or {}
    if "model" in merged and not isinstance(model, dict):
        raise ConfigError("section 'model' must be a mapping")
    aug = merged.get("augment") or {}
    if "ranges" in aug:
        aug = {**aug, "ranges": {k: tuple(v) for k, v in aug["ranges"].items()}}
    return RunConfig(
        model=ModelConfig.from_dict(model),
        training=_section(TrainingConfig, merged.get("training") or {}, "training"),
        augment=_section(CompoundAugmentConfig, aug, "augment"),
        data=_section(DatasetSpec, merged.get("data"), "data"),
        eval=_section(EvalConfig, merged.get("eval") or {}, "eval"),
    )


def load_config(path=None, preset: str = "full") -> RunConfig:
    if path is None:
        return build_config({}, preset)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return build_config(raw, preset)


def parse_noises(items) -> list[NoiseSpec]:
    """``name:level`` strings; ``sweep`` expands to every attack's escalating levels."""
    specs = []
    for item in items:
        if item == "sweep":
            specs.extend(NoiseSpec(n, lvl) for n in NOISES for lvl in attack_sweep_levels(n))
        else:
            specs.append(NoiseSpec.parse(item))
    return specs

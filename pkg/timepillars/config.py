"""
Run configuration: one dataclass per section, loaded from YAML with
``section.key=value`` overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataio import SceneConfig
from .evaluation import EvalConfig
from .network import BackboneConfig, ModelConfig
from .pillars import GridSpec, PillarConfig
from .training import LossConfig, TrainConfig

CONFIG_NAME = "config.yaml"


class ConfigError(ValueError):
    """Unknown key, bad override syntax or a value of the wrong type."""


@dataclass
class DataConfig:
    train_dir: str = "data/synthetic/train"
    eval_dir: str = "data/synthetic/eval"
    train_count: int = 200
    eval_count: int = 50


SECTIONS = {
    "grid": GridSpec,
    "pillars": PillarConfig,
    "backbone": BackboneConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "scene": SceneConfig,
    "eval": EvalConfig,
    "data": DataConfig,
}


@dataclass
class RunConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    pillars: PillarConfig = field(default_factory=PillarConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, out_dir):
        """Write the fully-resolved config as ``config.yaml`` into ``out_dir``."""
        path = Path(out_dir) / CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False, default_flow_style=None)
        return path


def _coerce(section, key, value, default):
    # YAML 1.1 reads "2e-3" as a string
    if isinstance(default, float) and not isinstance(default, bool):
        if isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}") from None
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ConfigError(f"{section}.{key} expects true/false, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return int(value)
    return value


def _build_section(name, values):
    cls = SECTIONS[name]
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {', '.join(unknown)}")
    merged = dataclasses.asdict(defaults)
    for key, value in values.items():
        merged[key] = _coerce(name, key, value, getattr(defaults, key))
    try:
        return cls(**merged)
    except ValueError as e:
        raise ConfigError(f"section '{name}': {e}") from e


def config_from_dict(data):
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping of sections")
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    sections = {}
    for name in SECTIONS:
        values = data.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        sections[name] = _build_section(name, values)
    return RunConfig(**sections)


def parse_override(text):
    """'section.key=value' -> (section, key, value parsed as YAML)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {path!r} must look like section.key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {raw!r}: {e}") from e
    return parts[0], parts[1], value


def apply_overrides(data, overrides=(), seed=None):
    """Apply 'section.key=value' overrides and the seed to a raw config mapping, in place."""
    for text in overrides:
        section, key, value = parse_override(text)
        if data.get(section) is None:
            data[section] = {}
        if not isinstance(data[section], dict):
            raise ConfigError(f"section '{section}' must be a mapping")
        data[section][key] = value
    if seed is not None:
        data.setdefault("train", {})["seed"] = seed
        data.setdefault("scene", {})["seed"] = seed
    return data


def load_config(path=None, overrides=(), seed=None):
    """
    Resolve a RunConfig: defaults <- YAML file <- overrides <- seed.

    Args:
        path: YAML file (None = built-in defaults)
        overrides: iterable of 'section.key=value'
        seed: Sets train.seed and scene.seed when given
    """
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a mapping of sections")
    return config_from_dict(apply_overrides(data, overrides, seed))

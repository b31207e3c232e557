"""Experiment configuration: dataclasses, TOML loading, strict validation.

Configs are plain TOML (nested tables mirror the dataclass nesting).
Unknown keys are hard errors reported with their full field path, since a
silently ignored hyperparameter typo is the classic sweep failure mode.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugPolicy
from .selftrain import SelfTrainConfig

MODES = ("supervised", "semi")


@dataclass
class DatasetConfig:
    preset: str = "three_class"        # three_class | twelve_class
    image_count: int = 924             # 65% train cut -> 600 train images
    seed: int = 1234                   # generation + split seed, shared across runs
    split_ratios: tuple[float, float, float] = (0.65, 0.20, 0.15)
    instances_per_image: tuple[int, int] = (1, 6)
    clutter_density: float = 40.0
    color_jitter: float = 0.40
    size_range: tuple[float, float] = (5.0, 12.0)
    image_cache: str = "npz"           # npz | png

    def __post_init__(self):
        if self.preset not in ("three_class", "twelve_class"):
            raise ValueError(f"unknown dataset preset {self.preset!r}")


@dataclass
class DetectorTableConfig:
    channels: tuple[int, int, int] = (10, 20, 20)
    tower_channels: int = 20
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25


@dataclass
class OptimizerConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    schedule: str = "cosine"       # cosine | constant
    final_lr_scale: float = 0.1    # cosine floor as a fraction of learning_rate

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    detector: DetectorTableConfig = field(default_factory=DetectorTableConfig)
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    augment: AugPolicy = field(default_factory=AugPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_iters: int = 4000
    eval_every: int = 400
    fractions: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5, 1.0)
    modes: tuple[str, ...] = ("supervised", "semi")
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    record_timing: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.modes:
            raise ValueError("modes must be non-empty")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ValueError(f"fraction {f} outside (0, 1]")

    def resolved_output_dir(self) -> str:
        root = os.environ.get("SEMIDET_OUTPUT_ROOT")
        if root and not os.path.isabs(self.output_dir):
            return os.path.join(root, self.output_dir)
        return self.output_dir


class ConfigError(ValueError):
    pass


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table")
        return _build_dataclass(hint, value, path)
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected an array")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]")
                         for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]")
                     for i, (v, a) in enumerate(zip(value, args)))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _build_dataclass(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key: {full}")
        kwargs[key] = _coerce(value, hints[key], full)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{path or cls.__name__}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build_dataclass(ExperimentConfig, data)


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Load TOML config (defaults when path is None) and apply dotted-path
    overrides, e.g. {"selftrain.tau": 0.6}."""
    data: dict = {}
    if path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {p} is not a table")
        node[parts[-1]] = value
    return config_from_dict(data)

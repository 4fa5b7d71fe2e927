"""Experiment configuration: a JSON file with one block per stage.

Missing keys take their defaults; unknown keys are rejected with the full
key path so typos never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from blab.classifier import TrainConfig
from blab.dbg import DbgConfig
from blab.errors import BlabError, ConfigError
from blab.metrics import LAMBDAS


@dataclass
class DatasetConfig:
    classes: int = 10
    dim: int = 8
    n_max: int = 500
    ratio: float = 100.0
    sigma: float = 1.0
    sep: float = 1.25
    seed: int = 0
    # Balanced held-out test set, drawn from its own seed stream.
    n_test: int = 1000


@dataclass
class DiffusionConfig:
    T: int = 100
    # None: the [1e-4, 0.02] range rescaled from 1000 steps to T.
    beta_start: float | None = None
    beta_end: float | None = None


@dataclass
class MetricsConfig:
    mc_samples: int = 20000
    lambdas: tuple = LAMBDAS
    overlap_estimator: str = "importance"
    confidence_scales: tuple = (0.5, 1.0, 1.5)
    confidence_per_class: int = 100
    seed: int = 0


@dataclass
class CompareConfig:
    # Modified-CFG scale for the head-to-tail arm.
    h2t_scale: float = 0.5
    # Standard-CFG scale of the reference generations its confidence is compared with.
    reference_scale: float = 1.0
    # Per-class size of the balanced control training set; None means n_max.
    balanced_per_class: int | None = None


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    dbg: DbgConfig = field(default_factory=DbgConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    output_dir: str = "runs/default"

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Copy with every stage's seed set to ``seed``."""
        return dataclasses.replace(
            self,
            dataset=dataclasses.replace(self.dataset, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            dbg=dataclasses.replace(self.dbg, seed=seed),
            metrics=dataclasses.replace(self.metrics, seed=seed),
        )

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        """SHA-256 of the canonical JSON, ignoring where the outputs go."""
        payload = self.to_dict()
        payload.pop("output_dir")
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


BLOCKS = {
    "dataset": DatasetConfig,
    "train": TrainConfig,
    "diffusion": DiffusionConfig,
    "dbg": DbgConfig,
    "metrics": MetricsConfig,
    "compare": CompareConfig,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(path, value, default):
    """Light type check against the default's type."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build_block(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object, got {type(raw).__name__}")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError(f"{path}: unknown key")
        kwargs[key] = value if value is None else _coerce(path, value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (BlabError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key == "output_dir":
            if not isinstance(value, str):
                raise ConfigError("output_dir: expected a string")
            kwargs[key] = value
        elif key in BLOCKS:
            kwargs[key] = _build_block(key, BLOCKS[key], value)
        else:
            raise ConfigError(f"{key}: unknown key")
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    ds = cfg.dataset
    if ds.classes < 3:
        raise ConfigError("dataset.classes: need at least 3 classes for the head/med/tail split")
    if ds.n_test < 3:
        raise ConfigError("dataset.n_test: need at least 3 test samples per class")
    if cfg.diffusion.T % 10:
        raise ConfigError("diffusion.T: must be divisible by 10")
    if (cfg.diffusion.beta_start is None) != (cfg.diffusion.beta_end is None):
        raise ConfigError("diffusion: set both beta_start and beta_end, or neither")
    if cfg.metrics.overlap_estimator not in ("importance", "pooled"):
        raise ConfigError("metrics.overlap_estimator: must be 'importance' or 'pooled'")
    if cfg.metrics.mc_samples < 1000:
        raise ConfigError("metrics.mc_samples: must be >= 1000")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(raw)

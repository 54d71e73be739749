"""One experiment config document, sectioned per module.

Every section maps onto a frozen dataclass. Files are YAML (JSON is
accepted too); keys a section does not know are rejected so a typo cannot
silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .cascade_sim import SimConfig
from .losses import LossConfig
from .model import ModelConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_users: int = 2000
    n_items: int = 20000
    d_true: int = 16
    seed: int = 7
    popularity_exponent: float = 1.2
    cross_noise: float = 0.5
    cross_rank: int = 4


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 20000
    n_eval: int = 4000
    train_seed: int = 11
    eval_seed: int = 12  # a later draw from the same world: the holdout
    clicked_only: bool = True


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 3
    lr_decay: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("need batch_size >= 1 and epochs >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (10, 100, 200, 1000, 2000)
    consistency_ks: tuple = (10, 100, 1000)
    tail_k: int = 200  # the tail-inclusive cutoff, K = N^r
    octile_metric: str = "ASH"


@dataclass(frozen=True)
class AblationConfig:
    variants: tuple = ("Base", "HCCP_wo_Up", "HCCP_full")
    seeds: tuple = (0, 1, 2, 3, 4)


SECTIONS = {
    "world": WorldConfig,
    "sim": SimConfig,
    "data": DataConfig,
    "sampler": SamplerConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Replace fields section-wise: ``with_overrides(train={"epochs": 1})``."""
        return from_dict(_merge(self.to_dict(), sections))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "lambda_task":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, name: str, values: Any):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"section '{name}': unknown keys {unknown}")
    kwargs = {}
    for k, v in values.items():
        default = known[k].default
        kwargs[k] = tuple(v) if isinstance(v, list) and (isinstance(default, tuple) or default is None) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{name}': {exc}") from exc


def from_dict(doc: dict) -> ExperimentConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping of sections")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections {unknown}; expected {sorted(SECTIONS)}")
    return ExperimentConfig(**{name: _build(cls, name, doc.get(name)) for name, cls in SECTIONS.items()})


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
    return from_dict(doc)


def dump_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))

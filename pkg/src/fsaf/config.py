"""Experiment configuration with named presets."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .qnet import config_hash

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    preset: str = "paper"
    # training hyperparameters
    batch_size: int = 128
    target_update_interval: int = 5
    eta: float = 0.01
    beta: float = 0.001
    buffer_size: int = 1000
    gamma: float = 0.98
    n_particles: int = 5
    budget: int = 100
    grid_size: int = 200
    dim: int = 3
    K: int = 5
    S: int = 1
    kappa: float = 1.0 / 128.0
    alpha: float = 1.0
    temperature: float = 1.0
    architecture: str = "paper"
    tasks_per_iteration: int = 3
    episodes_per_task: int = 4
    iterations: int = 1000
    meta_grad: str = "exact"
    meta_loss: str = "chaser"
    meta_optimizer: str = "adam"
    max_grad_norm: float | None = None
    noise: float = 1e-4
    checkpoint_interval: int = 50
    tasks: list = field(default_factory=list)
    # evaluation
    seed: int = 0
    trials: int = 100
    shots: int = 5
    ensemble: str = "mean"

    def __post_init__(self):
        choices = {
            "meta_grad": ("exact", "first_order"),
            "meta_loss": ("chaser", "td"),
            "meta_optimizer": ("adam", "sgd"),
            "ensemble": ("mean", "sample"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if self.alpha <= 0 or self.eta <= 0 or self.temperature <= 0:
            raise ValueError("alpha, eta and temperature must be positive")
        if self.K < 0 or self.S < 0:
            raise ValueError("K and S must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    "paper": {},
    "desk": {
        "budget": 30,
        "grid_size": 64,
        "dim": 1,
        "architecture": "desk",
        "iterations": 200,
        "beta": 0.01,
        "max_grad_norm": 10.0,
    },
}

FIELD_NAMES = {f.name for f in dataclasses.fields(ExperimentConfig)}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return from_dict({"preset": name, **overrides})


def from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - FIELD_NAMES)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    name = data.get("preset", "paper")
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    values = {**PRESETS[name], **data, "preset": name}
    base = ExperimentConfig(preset=name, **PRESETS[name])
    for key, value in data.items():
        if key != "preset" and getattr(base, key) != value:
            log.info("config override %s=%r (preset %s has %r)", key, value, name, getattr(base, key))
    return ExperimentConfig(**values)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of config keys")
    return from_dict(data)


def dump(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True)
    if path is not None:
        Path(path).write_text(text)
    return text

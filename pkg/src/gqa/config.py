"""Experiment configuration and named profiles.

``paper`` carries the published settings (64 patches of 512 points, radius
0.2, 240 pre-training epochs at 1e-3, 800 ranking epochs at 1e-4).  ``desk``
shrinks patches and epochs so the full pipeline runs on one CPU core.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    test_fraction: float = 0.1

    def validate(self, name="train"):
        if not self.lr > 0:
            raise ConfigError(f"{name}.lr must be > 0")
        if self.epochs < 1:
            raise ConfigError(f"{name}.epochs must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"{name}: betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"{name}.eps must be > 0")
        if self.batch_size < 1:
            raise ConfigError(f"{name}.batch_size must be >= 1")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError(f"{name}.test_fraction must be in [0, 1)")


@dataclass
class PatchConfig:
    N: int = 64
    radius: float = 0.2
    points: int = 512

    def validate(self):
        if self.N < 1 or self.points < 1:
            raise ConfigError("patch.N and patch.points must be >= 1")
        if not self.radius > 0:
            raise ConfigError("patch.radius must be > 0")


@dataclass
class ExperimentConfig:
    seed: int = 0
    levels: int = 10
    k: int = 20
    normal_k: int = 16
    patch: PatchConfig = field(default_factory=PatchConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, epochs=240, batch_size=64))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4, epochs=800))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-4, epochs=100, batch_size=16))
    metrics: list = field(default_factory=lambda: ["po2po_mse"])
    uniform_weights: bool = False
    no_patching: bool = False
    float64: bool = False

    def validate(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.normal_k < 3:
            raise ConfigError("normal_k must be >= 3")
        self.patch.validate()
        for name in ("pretrain", "train", "finetune"):
            getattr(self, name).validate(name)
        from .metrics import METRIC_IDS

        for m in self.metrics:
            if m.lower() not in METRIC_IDS:
                raise ConfigError(f"unknown metric {m!r}; choose from {', '.join(METRIC_IDS)}")
        return self

    def to_dict(self):
        return asdict(self)


PROFILES = {
    "paper": {},
    "desk": {
        "patch": {"N": 32, "radius": 0.2, "points": 64},
        "pretrain": {"lr": 3e-3, "epochs": 60, "batch_size": 32},
        "train": {"lr": 1e-3, "epochs": 100},
        "finetune": {"lr": 1e-3, "epochs": 300, "batch_size": 16},
    },
}


def _merge(obj, overrides: dict, path=""):
    names = {f.name: f for f in fields(obj)}
    for key, value in overrides.items():
        if key not in names:
            raise ConfigError(f"unknown config key {path}{key!r}")
        current = getattr(obj, key)
        if isinstance(current, (TrainConfig, PatchConfig)):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be a mapping")
            _merge(current, value, f"{path}{key}.")
        else:
            setattr(obj, key, value)
    return obj


def make_config(profile: str = "desk", overrides: dict | None = None, path=None) -> ExperimentConfig:
    """Profile defaults, then a YAML/JSON file, then explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    cfg = _merge(ExperimentConfig(), copy.deepcopy(PROFILES[profile]))
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        _merge(cfg, doc)
    if overrides:
        _merge(cfg, overrides)
    return cfg.validate()

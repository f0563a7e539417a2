"""Experiment configuration loaded from TOML.

A config file fully determines a run. Sections map onto the dataclasses
below; unknown keys are rejected so typos do not silently fall back to
defaults.

Example::

    task = "oneshot"
    seeds = [0, 1, 2]

    [dataset]
    kind = "blobs"
    spread = 1.0

    [crossbar]
    read_noise_sigma = 0.02
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .crossbar import CrossbarConfig

TASKS = ("train", "inject", "mc-eval", "ood-eval", "oneshot", "rank", "fingerprint", "recalibrate", "sweep")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    n: int = 20000
    n_test: int = 2000
    classes: int = 10
    dim: int = 16
    spread: float = 1.0
    noise: float = 0.1
    # None: the data seed follows the run seed
    seed: Optional[int] = None
    normalize: bool = True
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("blobs", "moons", "idx"):
            raise ConfigError(f"dataset.kind must be blobs, moons or idx, not {self.kind!r}")
        if self.kind == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("dataset.kind = 'idx' needs train_images and train_labels")
        if self.n < 1 or self.n_test < 1:
            raise ConfigError("dataset sizes must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    name: str = "MLP-S"
    binary: bool = False
    variant: str = "none"
    p: float = 0.1
    epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    # > 0 enables variation-aware training
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class BayesConfig:
    samples: int = 20
    score: str = "entropy"

    def __post_init__(self):
        if self.samples < 1:
            raise ConfigError("bayes.samples must be >= 1")
        if self.score not in ("entropy", "mutual_information"):
            raise ConfigError("bayes.score must be entropy or mutual_information")


@dataclass(frozen=True)
class FaultConfig:
    stuck_on_rate: float = 0.05
    stuck_off_rate: float = 0.0
    scenarios: int = 100
    rates: Tuple[float, ...] = (0.01, 0.02, 0.05, 0.1)

    def __post_init__(self):
        if not (0 <= self.stuck_on_rate and 0 <= self.stuck_off_rate and self.stuck_on_rate + self.stuck_off_rate <= 1):
            raise ConfigError("stuck-at rates must be >= 0 and sum to at most 1")
        if self.scenarios < 1:
            raise ConfigError("faults.scenarios must be >= 1")


@dataclass(frozen=True)
class SelfTestConfig:
    k_fraction: float = 0.002
    steps: int = 1000
    lr: float = 0.2
    replays: int = 32
    false_positive_replays: int = 200
    fingerprint_epochs: int = 10
    fingerprint_inputs: int = 200


@dataclass(frozen=True)
class MitigationConfig:
    method: str = "approx_bn"
    sigma: float = 0.5
    calibration_fraction: float = 0.002
    reference_scenarios: int = 8

    def __post_init__(self):
        if self.method not in ("approx_bn", "reference"):
            raise ConfigError("mitigation.method must be approx_bn or reference")


@dataclass(frozen=True)
class SweepConfig:
    task: str = "inject"
    param: str = "faults.stuck_on_rate"
    values: Tuple[Any, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "train"
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    crossbar: CrossbarConfig = field(default_factory=lambda: CrossbarConfig(read_noise_sigma=0.02))
    bayes: BayesConfig = field(default_factory=BayesConfig)
    faults: FaultConfig = field(default_factory=FaultConfig)
    selftest: SelfTestConfig = field(default_factory=SelfTestConfig)
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}; got {self.task!r}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.task == "sweep":
            if self.sweep.task not in TASKS or self.sweep.task == "sweep":
                raise ConfigError(f"sweep.task {self.sweep.task!r} is not a runnable task")
            if not self.sweep.values:
                raise ConfigError("sweep.values must not be empty")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def sha256(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def with_seeds(self, seeds: List[int]) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def with_value(self, dotted: str, value: Any) -> "ExperimentConfig":
        """Copy with one ``section.key`` (or top-level key) replaced."""
        d = self.to_dict()
        parts = dotted.split(".")
        target = d
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"unknown config section in {dotted!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key {dotted!r}")
        target[parts[-1]] = value
        return from_dict(d)


_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "crossbar": CrossbarConfig,
    "bayes": BayesConfig,
    "faults": FaultConfig,
    "selftest": SelfTestConfig,
    "mitigation": MitigationConfig,
    "sweep": SweepConfig,
}


def _build(cls, values: Dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def from_dict(d: Dict[str, Any]) -> ExperimentConfig:
    d = dict(d)
    top: Dict[str, Any] = {}
    for key in list(d):
        if key in _SECTIONS:
            section = d.pop(key)
            if not isinstance(section, dict):
                raise ConfigError(f"[{key}] must be a table")
            top[key] = _build(_SECTIONS[key], section, key)
    return _build(ExperimentConfig, {**d, **top}, "top level")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(raw)

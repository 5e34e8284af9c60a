"""Experiment configuration: nested dataclasses loaded from and archived as JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .consistency import CTConfig
from .diffusion import DSMConfig
from .rewards import TASK_DATASET
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    H: int = 8
    rho: float = 7.0
    eps: float = 0.002
    T: float = 80.0


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    embed_dim: int = 8
    activation: str = "tanh"
    n_freq: int = 8
    sigma_data: float = 0.5
    H_diff: int = 50


@dataclass
class RLConfig:
    """TrainConfig fields set per experiment; horizon, rho and seed come from elsewhere."""

    clip_range: float = 1e-4
    adv_clip_max: float = 10.0
    lr: float = 1e-4
    max_grad_norm: float = 5.0
    batches_per_epoch: int = 10
    sample_batch_size: int = 16
    train_batch_size: int = 8
    grad_accum_steps: int = 2
    inner_epochs: int = 1
    epochs: int = 100
    buffer_size: int = 16
    min_count: int = 16


@dataclass
class RewardConfig:
    scorer_seed: int = 0
    quant_step: float = 16.0
    # patterns are scored at their native 8x8 size
    eval_size: int = 8


@dataclass
class EvalConfig:
    n_samples: int = 2000
    eval_seed: int = 999
    trajectories: int = 100
    horizons: list[int] = field(default_factory=lambda: [2, 4, 8])
    ablation_epochs: int = 200
    budgets: list[float] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    task: str = "target2d"
    arm: str = "rlcm"
    dataset: str = ""
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    pretrain_seed: int = 0
    out_dir: str = "runs"
    checkpoint_every: int = 1
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: RLConfig = field(default_factory=RLConfig)
    ct: CTConfig = field(default_factory=CTConfig)
    dsm: DSMConfig = field(default_factory=DSMConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in TASK_DATASET:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(TASK_DATASET)}")
        if self.arm not in ("rlcm", "ddpo"):
            raise ConfigError(f"unknown arm {self.arm!r}; choose rlcm or ddpo")
        if not self.dataset:
            self.dataset = TASK_DATASET[self.task]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.grid.H < 1 or not 0 < self.grid.eps < self.grid.T:
            raise ConfigError(f"invalid grid {self.grid}")

    def train_config(self, seed: int, horizon: int | None = None, epochs: int | None = None) -> TrainConfig:
        kw = asdict(self.train)
        if epochs is not None:
            kw["epochs"] = epochs
        try:
            return TrainConfig(horizon=horizon or self.grid.H, rho=self.grid.rho, seed=seed, **kw)
        except ValueError as err:
            raise ConfigError(f"train section: {err}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kw = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kw[key] = _build(hint, value, f"{where}.{key}")
        else:
            kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"{where}: {err}") from None


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return ExperimentConfig.from_dict(data)


def save_config(path, cfg: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any

from openintent.errors import ConfigError
from openintent.types import BoundaryMode, ContrastiveType, LRSchedulerType, PathType, RadiusParametrization
from openintent.utils import round_half_up

DEFAULT_SWEEP_RATIOS = [0.80, 0.85, 0.90, 0.95, 1.00, 1.05, 1.10, 1.15, 1.20]


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass
class Stage1Config:
    temperature: float = 0.07
    lambda_weight: float = 0.25
    num_positives: int = 3
    num_negatives: int = 1
    contrastive: ContrastiveType = ContrastiveType.kccl
    token_dim: int = 64
    hidden_size: int = 64
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    lr_scheduler: LRSchedulerType = LRSchedulerType.constant
    num_warmup_steps: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    token_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.contrastive = ContrastiveType(self.contrastive)
        self.lr_scheduler = LRSchedulerType(self.lr_scheduler)
        _check(self.temperature > 0, f'temperature must be > 0, got {self.temperature}')
        _check(0 <= self.lambda_weight <= 1, f'lambda_weight must be in [0, 1], got {self.lambda_weight}')
        _check(self.num_positives >= 1, f'num_positives (K) must be >= 1, got {self.num_positives}')
        _check(self.num_negatives >= 1, f'num_negatives (M) must be >= 1, got {self.num_negatives}')
        _check(self.token_dim >= 1 and self.hidden_size >= 1, 'token_dim and hidden_size must be positive')
        _check(self.learning_rate > 0, f'learning_rate must be > 0, got {self.learning_rate}')
        _check(self.batch_size >= 1, f'batch_size must be >= 1, got {self.batch_size}')
        _check(self.epochs >= 1, f'epochs must be >= 1, got {self.epochs}')
        _check(0 <= self.token_dropout < 1, f'token_dropout must be in [0, 1), got {self.token_dropout}')


@dataclass
class Stage2Config:
    eta: float = 1.0
    expansion: float = 0.5
    shrink: float = 0.2
    mode: BoundaryMode = BoundaryMode.adbes
    radius_parametrization: RadiusParametrization = RadiusParametrization.clamp
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.mode = BoundaryMode(self.mode)
        self.radius_parametrization = RadiusParametrization(self.radius_parametrization)
        _check(self.shrink >= 0, f'shrink margin s must be >= 0, got {self.shrink}')
        _check(
            self.expansion > self.shrink,
            f'expansion margin e must exceed shrink margin s, got e={self.expansion}, s={self.shrink}',
        )
        _check(self.eta >= 0, f'eta must be >= 0, got {self.eta}')
        _check(self.learning_rate > 0, f'learning_rate must be > 0, got {self.learning_rate}')
        _check(self.batch_size >= 1, f'batch_size must be >= 1, got {self.batch_size}')
        _check(self.epochs >= 1, f'epochs must be >= 1, got {self.epochs}')
        _check(self.patience is None or self.patience >= 1, f'patience must be >= 1, got {self.patience}')


@dataclass
class SyntheticConfig:
    num_classes: int = 12
    open_fraction: float = 1 / 3
    train_per_class: int = 200
    valid_per_class: int = 20
    test_per_class: int = 50
    vocab_size: int = 400
    latent_dim: int = 16
    spread: float = 0.35
    token_temperature: float = 0.15
    noise_rate: float = 0.2
    min_length: int = 6
    max_length: int = 14
    seed: int = 0

    def __post_init__(self):
        _check(self.num_classes >= 2, f'num_classes must be >= 2, got {self.num_classes}')
        _check(0 <= self.open_fraction < 1, f'open_fraction must be in [0, 1), got {self.open_fraction}')
        _check(
            round_half_up(self.open_fraction * self.num_classes) < self.num_classes,
            f'open_fraction {self.open_fraction} leaves no known class among {self.num_classes}',
        )
        _check(min(self.train_per_class, self.valid_per_class, self.test_per_class) >= 1, 'per-class counts must be >= 1')
        _check(self.spread >= 0, f'spread must be >= 0, got {self.spread}')
        _check(self.token_temperature > 0, 'token_temperature must be > 0')
        _check(0 <= self.noise_rate <= 1, f'noise_rate must be in [0, 1], got {self.noise_rate}')
        _check(1 <= self.min_length <= self.max_length, 'need 1 <= min_length <= max_length')


@dataclass
class RunConfig:
    dataset_dir: str = 'data'
    output_dir: str = 'experiments/openintent'
    proportion: float = 0.75
    split_seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])
    max_len: int = 40
    min_freq: int = 1
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    precomputed_dir: str | None = None
    sweep_ratios: list[float] = field(default_factory=lambda: list(DEFAULT_SWEEP_RATIOS))
    msp_threshold: float = 0.5
    use_tensorboard: bool = False

    def __post_init__(self):
        if isinstance(self.stage1, dict):
            self.stage1 = Stage1Config(**self.stage1)
        if isinstance(self.stage2, dict):
            self.stage2 = Stage2Config(**self.stage2)
        _check(0 < self.proportion <= 1, f'proportion must be in (0, 1], got {self.proportion}')
        _check(len(self.seeds) >= 1, 'at least one seed is required')
        _check(self.max_len >= 1, f'max_len must be >= 1, got {self.max_len}')
        _check(self.min_freq >= 1, f'min_freq must be >= 1, got {self.min_freq}')
        _check(all(ratio > 0 for ratio in self.sweep_ratios), 'sweep ratios must be > 0')
        _check(0 < self.msp_threshold < 1, f'msp_threshold must be in (0, 1), got {self.msp_threshold}')

    def for_seed(self, seed: int) -> RunConfig:
        return replace(
            self,
            seeds=[seed],
            stage1=replace(self.stage1, seed=seed),
            stage2=replace(self.stage2, seed=seed),
        )

    def override(self, **values: Any) -> RunConfig:
        """Apply flat overrides; `stage1.` / `stage2.` prefixed keys address the nested configs."""
        top: dict[str, Any] = {}
        nested: dict[str, dict[str, Any]] = {'stage1': {}, 'stage2': {}}
        for key, value in values.items():
            if value is None:
                continue
            section, _, name = key.rpartition('.')
            if section in nested:
                nested[section][name] = value
            else:
                top[key] = value
        valid = {f.name for f in fields(self)}
        unknown = set(top) - valid
        if unknown:
            raise ConfigError(f'unknown config fields: {sorted(unknown)}')
        try:
            return replace(
                self,
                stage1=replace(self.stage1, **nested['stage1']),
                stage2=replace(self.stage2, **nested['stage2']),
                **top,
            )
        except TypeError as e:
            raise ConfigError(f'invalid config override: {e}') from e

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def save(self, path: PathType) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n')

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f'invalid run config: {e}') from e

    @classmethod
    def from_json(cls, path: PathType) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f'config file not found: {path}')
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f'config file {path} is not valid JSON: {e}') from e
        return cls.from_dict(data)


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value

"""Declarative run configuration.

One JSON file controls sizes, schedules, widths, optimizer settings, and
seeds for every pipeline stage.  Every key has a default; unknown keys
are rejected so typos fail loudly.  The canonical serialized form feeds
the manifest's config hash.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__} section must be an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        if dataclasses.is_dataclass(f.type) or (isinstance(f.type, str) and f.type[0].isupper()):
            sub = _SECTION_TYPES.get(key)
            kwargs[key] = _from_dict(sub, value) if sub else value
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


@dataclass(frozen=True)
class GeometryConfig:
    high_size: int = 64          # phantom grid; low-res is high_size // 4
    voxel_mm: float = 4.0        # spacing at high resolution

    @property
    def low_size(self) -> int:
        return self.high_size // 4


@dataclass(frozen=True)
class ScheduleConfig:
    T_low: int = 250
    T_high: int = 250
    s: float = 0.008


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 1000
    seed_base: int = 10_000


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int = 512
    max_len: int = 256
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    weight_decay: float = 0.01


@dataclass(frozen=True)
class LowresModelConfig:
    base_width: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 3)
    heads: int = 4
    time_embedding_dim: int = 128


@dataclass(frozen=True)
class SuperresModelConfig:
    base_width: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 3, 4)
    heads: int = 4
    time_embedding_dim: int = 128
    axial_axis: int = 0


@dataclass(frozen=True)
class TrainStageConfig:
    steps: int = 4000
    batch_size: int = 16
    grad_accum: int = 1
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    mixed_precision: bool = False


@dataclass(frozen=True)
class FeaturesConfig:
    dim: int = 32
    steps: int = 600
    lr: float = 1e-3


@dataclass(frozen=True)
class StudyConfig:
    n_per_prompt: int = 32
    stage: str = "low"           # measure on the "low" or "high" stage output


@dataclass(frozen=True)
class EvaluateConfig:
    n_samples: int = 128


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workdir: str = "runs"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    text: TextConfig = field(default_factory=TextConfig)
    lowres_model: LowresModelConfig = field(default_factory=LowresModelConfig)
    superres_model: SuperresModelConfig = field(default_factory=SuperresModelConfig)
    train_low: TrainStageConfig = field(default_factory=TrainStageConfig)
    train_super: TrainStageConfig = field(
        default_factory=lambda: TrainStageConfig(steps=1200, batch_size=2, lr=2e-4)
    )
    features: FeaturesConfig = field(default_factory=FeaturesConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.geometry.high_size % 4 != 0 or self.geometry.high_size < 16:
            raise ConfigurationError("geometry.high_size must be a multiple of 4, >= 16")
        if self.schedule.T_low < 2 or self.schedule.T_high < 2:
            raise ConfigurationError("schedules need at least 2 steps")
        if self.study.stage not in ("low", "high"):
            raise ConfigurationError("study.stage must be 'low' or 'high'")


_SECTION_TYPES = {
    "geometry": GeometryConfig,
    "schedule": ScheduleConfig,
    "dataset": DatasetConfig,
    "text": TextConfig,
    "lowres_model": LowresModelConfig,
    "superres_model": SuperresModelConfig,
    "train_low": TrainStageConfig,
    "train_super": TrainStageConfig,
    "features": FeaturesConfig,
    "study": StudyConfig,
    "evaluate": EvaluateConfig,
}

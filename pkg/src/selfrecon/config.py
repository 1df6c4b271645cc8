"""Run configuration: nested dataclasses, YAML round-trip and a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .geometry import DEFAULT_FOV_DEG, DEFAULT_RADIUS
from .reconstructor import ModelConfig

ABLATIONS = ("naive-sem", "e2e-cycle", "no-curriculum", "no-selftrain", "input-loss-only")


@dataclass
class LossWeights:
    lambda_perceptual: float = 1.0
    lambda_in: float = 0.3
    lambda_pix: float = 5.0
    lambda_sem: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @property
    def self_training_enabled(self) -> bool:
        return any(w > 0 for w in (self.lambda_in, self.lambda_pix, self.lambda_sem))


@dataclass
class CurriculumConfig:
    theta_min: float = 15.0
    theta_max: float = 90.0
    phi_min: float = 15.0
    phi_max: float = 90.0
    enabled: bool = True

    def __post_init__(self):
        if self.theta_min > self.theta_max or self.phi_min > self.phi_max:
            raise ValueError("curriculum endpoints need min <= max")


@dataclass
class OptimConfig:
    lr: float = 4e-4
    warmup: int = 150
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.96
    eps: float = 1e-6
    weight_decay: float = 0.05
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0 or self.warmup < 0:
            raise ValueError("lr and warmup must be non-negative")


@dataclass
class TrainConfig:
    j_max: int = 2000
    batch_size: int = 8
    supervision_views: int = 4
    semantic_views: int = 4
    render_resolution: int | None = None  # None: same as the model input
    samples_per_ray: int = 128
    eval_resolution: int = 224
    eval_samples_per_ray: int = 128
    checkpoint_every: int = 500
    naive_semantic: bool = False
    e2e_cycle: bool = False

    def __post_init__(self):
        if self.j_max < 1:
            raise ValueError("j_max must be >= 1")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2")
        if self.semantic_views < 1 or self.supervision_views < 1:
            raise ValueError("view counts must be >= 1")


@dataclass
class CameraConfig:
    radius: float = DEFAULT_RADIUS
    fov_deg: float = DEFAULT_FOV_DEG


@dataclass
class DataConfig:
    synthetic: str | None = None
    real: str | None = None
    evaluation: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    @property
    def render_resolution(self) -> int:
        return self.train.render_resolution or self.model.input_resolution

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {})

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory if known[name].default_factory is not dataclasses.MISSING else None
        sub = default() if default is not None else None
        kwargs[name] = _build(type(sub), value) if is_dataclass(sub) else value
    return cls(**kwargs)


def apply_ablation(config: RunConfig, name: str | None) -> RunConfig:
    """Return a copy of ``config`` with one of the named ablations applied."""
    if name is None:
        return config
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    if name == "naive-sem":
        return replace(config, train=replace(config.train, naive_semantic=True))
    if name == "e2e-cycle":
        return replace(config, train=replace(config.train, e2e_cycle=True))
    if name == "no-curriculum":
        return replace(config, curriculum=replace(config.curriculum, enabled=False))
    if name == "no-selftrain":
        return replace(config, weights=replace(config.weights, lambda_in=0.0, lambda_pix=0.0, lambda_sem=0.0))
    return replace(config, weights=replace(config.weights, lambda_pix=0.0, lambda_sem=0.0))

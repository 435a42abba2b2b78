"""Run configuration: one JSON document, strictly validated, with a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SampleConfig:
    steps: int = 25
    guidance_scale: float = 4.5
    sampler: str = "ddim"
    # predicted x0 is clipped to +-clip_x0 each step; the synthetic latents stay within [-0.3, 1.4]
    clip_x0: float | None = 1.5
    # captions sampled without layout by `l2s sample`; empty means held-out stories with layout
    prompts: list = field(default_factory=list)


@dataclass
class TrainingConfig:
    lr: float = 2e-5
    weight_decay: float = 0.03
    batch: int = 8
    steps: int = 1000
    stage2_lr: float = 1e-5
    stage2_batch: int = 4
    stage2_steps: int = 1000
    p_layout: float = 0.25
    p_caption: float = 0.25
    p_uncond: float = 0.1
    grad_clip: float = 1.0
    checkpoint_every: int = 500
    log_every: int = 100


@dataclass
class PipelineConfig:
    aes_threshold: float = 4.0
    length_dist: dict = field(default_factory=lambda: {"4": 0.5, "5": 0.3, "6": 0.2})
    length_share: str = "sequences"
    bench_fraction: float = 0.25
    cap_per_category: int = 8
    kmeans_iters: int = 100


@dataclass
class DataConfig:
    n_train: int = 2000
    n_heldout: int = 64
    frame_counts: list = field(default_factory=lambda: [4])
    radii: list = field(default_factory=lambda: [2, 3])
    noise_std: float = 0.05
    n_videos: int = 8
    frames_per_video: int = 320


@dataclass
class EvalConfig:
    n_samples: int = 64
    sample_batch: int = 8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_dict(self) -> dict:
        return dataclasses.asdict(self.model)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def length_dist(self) -> dict[int, float]:
        return {int(k): float(v) for k, v in self.pipeline.length_dist.items()}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(obj: dict) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING \
            else fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = _check_type(value, default, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _check_type(value, default, where):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(data)


def validate(cfg: RunConfig) -> None:
    t = cfg.training
    for name in ("p_layout", "p_caption", "p_uncond"):
        p = getattr(t, name)
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"training.{name} must lie in [0, 1], got {p}")
    if t.batch < 1 or t.stage2_batch < 1 or t.steps < 0 or t.stage2_steps < 0:
        raise ConfigError("training batch sizes must be positive and step counts non-negative")
    total = sum(float(v) for v in cfg.pipeline.length_dist.values())
    if abs(total - 1.0) > 1e-9:
        raise ConfigError(f"pipeline.length_dist must sum to 1, got {total}")
    if cfg.sample.sampler not in ("ddim", "ddpm"):
        raise ConfigError(f"sample.sampler must be ddim or ddpm, got {cfg.sample.sampler!r}")
    if not all(isinstance(p, str) and p.strip() for p in cfg.sample.prompts):
        raise ConfigError("sample.prompts must be non-empty strings")
    if any(f > cfg.model.max_frames for f in cfg.data.frame_counts):
        raise ConfigError("data.frame_counts exceed model.max_frames")

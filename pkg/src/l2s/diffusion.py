"""Noise schedule, epsilon-prediction objective, two-stage training, sampling."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import BadRange, BadSpec, BadTimestep, MissingStage1Checkpoint, NonFiniteLoss
from .layout import AttentionBiasSet, apply_layout_dropout, rasterize_bbox
from .model import (
    NULL_CAPTION,
    ForwardOptions,
    Layout,
    ModelConfig,
    SubjectInputs,
    copy_global_to_subject,
    denoiser_forward,
    init_params,
    is_global_param,
    is_subject_param,
    prepare_subject_inputs,
    substitute_captions,
)
from .numerics import ParameterStore, RngStream, Tensor
from .story import StorySequence

log = logging.getLogger(__name__)


@dataclass
class DiffusionSchedule:
    beta: np.ndarray  # index t-1 holds beta_t

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def abar(self, t) -> np.ndarray:
        """alpha_bar at 1-based t; t = 0 maps to 1 (clean data)."""
        t = np.asarray(t)
        return np.where(t > 0, self.alpha_bar[np.clip(t, 1, self.T) - 1], 1.0)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T < 2:
        raise BadRange("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise BadRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising ``sqrt(abar) z0 + sqrt(1 - abar) eps``.

    ``t`` is a scalar or one 1-based timestep per leading-axis sample.
    """
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise BadTimestep(f"timesteps must lie in [1, {schedule.T}]")
    ab = schedule.abar(t)
    if ab.ndim:
        ab = _per_sample(ab, z0.ndim)
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype, copy=False)


def q_step(z_prev: np.ndarray, t: int, noise: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """One forward transition q(z_t | z_{t-1})."""
    b = schedule.beta[t - 1]
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * noise


def predict_x0(z_t: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    ab = schedule.abar(np.asarray(t))
    if ab.ndim:
        ab = _per_sample(ab, z_t.ndim)
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


# ------------------------------------------------------------------ objective

@dataclass
class Strategies:
    p_layout: float = 0.25
    p_caption: float = 0.25
    p_uncond: float = 0.1


ModelFn = Callable[[np.ndarray, np.ndarray, list, SubjectInputs | None], Tensor]


@dataclass
class PreparedBatch:
    z0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z_t: np.ndarray
    captions: list[str]
    subject: SubjectInputs | None
    layout_dropped: np.ndarray
    caption_swapped: np.ndarray
    uncond: np.ndarray


def prepare_batch(batch: Sequence[StorySequence], cfg: ModelConfig, schedule: DiffusionSchedule,
                  rng: RngStream, strategies: Strategies, stage: int, dtype=np.float64) -> PreparedBatch:
    """Draw timesteps/noise and apply the three stochastic conditioning strategies.

    Every per-sample decision comes from a substream keyed by the story id,
    so decisions do not depend on batch order.
    """
    ids = [s.story_id or str(i) for i, s in enumerate(batch)]
    z0 = np.stack([s.frames for s in batch]).astype(dtype)
    b, f = z0.shape[:2]
    t = np.array([rng.child(f"t/{sid}").integers(1, schedule.T + 1) for sid in ids])
    eps = np.stack([rng.child(f"eps/{sid}").normal(z0.shape[1:], dtype) for sid in ids])
    z_t = q_sample(z0, t, eps, schedule)
    globals_ = [s.global_caption for s in batch]
    uncond = np.array([rng.child(f"uncond/{sid}").random() < strategies.p_uncond for sid in ids])

    if stage == 1:
        caps = [NULL_CAPTION if u else g for g, u in zip(globals_, uncond)]
        none = np.zeros(b, dtype=bool)
        return PreparedBatch(z0, t, eps, z_t, caps, None, none, none, uncond)

    masks = np.stack([np.stack([rasterize_bbox(bx, cfg.h, cfg.w).grid for bx in s.boxes]) for s in batch])
    biases = AttentionBiasSet.from_masks(masks, dtype=dtype)
    biases, dropped = apply_layout_dropout(biases, strategies.p_layout, rng.child("layout"), ids)
    sub_caps, swapped = substitute_captions([s.subject_captions for s in batch], globals_,
                                            strategies.p_caption, rng.child("caption"), ids)
    ref_frame = np.array([rng.child(f"ref/{sid}").integers(0, f) for sid in ids])
    ref_latent = np.stack([z0[i, ref_frame[i]] for i in range(b)])
    ref_mask = np.stack([masks[i, ref_frame[i]] for i in range(b)])[..., None].astype(dtype)
    # a dropped layout stands for a user who gave neither boxes nor a reference
    ref_latent[dropped] = 0.0
    ref_mask[dropped] = 1.0
    sub = SubjectInputs(biases, sub_caps, ref_latent, ref_mask, ref_frame)
    caps = [NULL_CAPTION if u else g for g, u in zip(globals_, uncond)]
    return PreparedBatch(z0, t, eps, z_t, caps, sub, dropped, swapped, uncond)


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    return (diff * diff).mean()


def training_loss(batch: Sequence[StorySequence], store: ParameterStore, cfg: ModelConfig,
                  schedule: DiffusionSchedule, rng: RngStream, strategies: Strategies | None = None,
                  stage: int = 2, model_fn: ModelFn | None = None) -> Tensor:
    """Mean squared error between the drawn noise and the model's prediction.

    Stage 1 trains the global branch alone (subject branch not run); stage 2
    runs the full model. ``model_fn`` substitutes the denoiser (test doubles).
    """
    strategies = strategies or Strategies()
    pb = prepare_batch(batch, cfg, schedule, rng, strategies, stage, store.dtype)
    if model_fn is None:
        opts = ForwardOptions(use_subject=stage == 2)
        pred = denoiser_forward(store, cfg, pb.z_t, pb.t, pb.captions, pb.subject, opts)
    else:
        pred = model_fn(pb.z_t, pb.t, pb.captions, pb.subject)
    return mse(pred, pb.eps)


# ------------------------------------------------------------------ training driver

@dataclass
class TrainSettings:
    lr: float = 2e-4
    weight_decay: float = 0.03
    batch: int = 8
    steps: int = 1000
    p_layout: float = 0.25
    p_caption: float = 0.25
    p_uncond: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 50

    @property
    def strategies(self) -> Strategies:
        return Strategies(self.p_layout, self.p_caption, self.p_uncond)


@dataclass
class TrainState:
    stage: int
    step: int = 0
    losses: list[float] = field(default_factory=list)

    def frozen(self, name: str) -> bool:
        return is_global_param(name) if self.stage == 2 else is_subject_param(name)


@dataclass
class TrainResult:
    store: ParameterStore
    state: TrainState
    interrupted: bool = False


def _frames_as_stories(dataset: Sequence[StorySequence]) -> list[StorySequence]:
    out = []
    for s in dataset:
        for j in range(s.n_frames):
            out.append(StorySequence(s.frames[j : j + 1], s.global_caption, [s.subject_captions[j]],
                                     [s.boxes[j]], 0, f"{s.story_id}#{j}", s.video_id, s.meta))
    return out


def _length_buckets(dataset: Sequence[StorySequence]) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        buckets.setdefault(s.n_frames, []).append(i)
    return buckets


def train_stage(stage: int, dataset: Sequence[StorySequence], settings: TrainSettings,
                cfg: ModelConfig, store: ParameterStore | None = None, seed: int = 0,
                log_path: str | Path | None = None,
                on_checkpoint: Callable[[ParameterStore, TrainState], None] | None = None,
                should_stop: Callable[[], bool] | None = None,
                dtype=np.float32, schedule: DiffusionSchedule | None = None) -> TrainResult:
    """Run one training stage.

    Stage 1 trains the global branch on single frames. Stage 2 needs the
    stage-1 parameters in ``store``; it copy-initialises the subject branch,
    freezes every global parameter and trains on whole sequences.
    """
    if stage not in (1, 2):
        raise BadSpec(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and store is None:
        raise MissingStage1Checkpoint("stage 2 needs the stage-1 checkpoint")
    if store is None:
        store = init_params(cfg, seed, dtype)
    if stage == 2:
        copy_global_to_subject(store, cfg)
        store.moments.clear()
    state = TrainState(stage)
    for name, t in store.items():
        t.requires_grad = not state.frozen(name)
    trainable = store.subset(lambda n: not state.frozen(n))

    data = _frames_as_stories(dataset) if stage == 1 else list(dataset)
    buckets = _length_buckets(data)
    sizes = sorted(buckets)
    weights = np.array([len(buckets[k]) for k in sizes], dtype=np.float64)
    weights /= weights.sum()
    schedule_ = schedule or make_schedule()
    root = RngStream(seed, f"train/stage{stage}")
    strategies = settings.strategies
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    interrupted = False
    try:
        for step in range(1, settings.steps + 1):
            t0 = time.perf_counter()
            srng = root.child(f"step{step}")
            length = sizes[int(srng.choice(len(sizes), p=weights))]
            pool = buckets[length]
            pick = srng.choice(len(pool), size=min(settings.batch, len(pool)), replace=False)
            batch = [data[pool[i]] for i in pick]
            with nx.recording():
                loss = training_loss(batch, store, cfg, schedule_, srng, strategies, stage)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NonFiniteLoss(step, value)
                grads = nx.backward(loss, trainable)
            gnorm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
            if settings.grad_clip and gnorm > settings.grad_clip:
                factor = settings.grad_clip / gnorm
                grads = {k: g * factor for k, g in grads.items()}
            nx.adamw_step(trainable, grads, settings.lr, settings.weight_decay, settings.betas, step)
            state.step = step
            state.losses.append(value)
            wall_ms = (time.perf_counter() - t0) * 1e3
            if log_file:
                log_file.write(json.dumps({"step": step, "stage": stage, "loss": value,
                                           "grad_norm": gnorm, "wall_ms": round(wall_ms, 3)}) + "\n")
            if settings.log_every and step % settings.log_every == 0:
                recent = np.mean(state.losses[-settings.log_every:])
                log.info("stage %d step %d loss %.4f (%.0f ms/step)", stage, step, recent, wall_ms)
            if on_checkpoint and settings.checkpoint_every and step % settings.checkpoint_every == 0:
                on_checkpoint(store, state)
            if should_stop and should_stop():
                interrupted = True
                break
    finally:
        if log_file:
            log_file.close()
        for t in store.params.values():
            t.requires_grad = True
    if on_checkpoint:
        on_checkpoint(store, state)
    return TrainResult(store, state, interrupted)


# ------------------------------------------------------------------ sampling

@dataclass
class SampleSpec:
    steps: int = 25
    guidance_scale: float = 4.5
    sampler: str = "ddim"
    seed: int = 0
    clip_x0: float | None = None

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise BadSpec(f"steps must lie in [1, {T}], got {self.steps}")
        if self.guidance_scale < 0:
            raise BadSpec("guidance_scale must be non-negative")
        if self.sampler not in ("ddim", "ddpm"):
            raise BadSpec(f"unknown sampler {self.sampler!r}")
        if self.sampler == "ddpm" and self.steps != T:
            raise BadSpec("the ancestral sampler runs every timestep; set steps = T")


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: ``eps_u + s (eps_c - eps_u)``."""
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided 1-based timesteps, descending, starting at T."""
    stride = T / steps
    return np.array([T - int(round(i * stride)) for i in range(steps)], dtype=np.int64)


def _duplicate_subject(sub: SubjectInputs) -> SubjectInputs:
    return SubjectInputs(
        AttentionBiasSet(np.concatenate([sub.biases.keys, sub.biases.keys]), sub.biases.caption_len, sub.biases.dtype),
        sub.subject_captions + sub.subject_captions,
        np.concatenate([sub.ref_latent, sub.ref_latent]),
        np.concatenate([sub.ref_mask, sub.ref_mask]),
        np.concatenate([sub.ref_frame, sub.ref_frame]),
    )


def make_eps_fn(store: ParameterStore, cfg: ModelConfig, captions: Sequence[str], layout: Layout | None,
                f: int, use_subject: bool = True):
    """Return eps(z, t, scale) evaluating conditional and unconditional passes.

    The unconditional pass replaces the global caption by the empty condition
    and keeps the (possibly fallback) subject inputs unchanged.
    """
    b = len(captions)
    sub = prepare_subject_inputs(layout, captions, f, cfg, store.dtype) if use_subject else None
    sub2 = _duplicate_subject(sub) if sub is not None else None
    opts = ForwardOptions(use_subject=use_subject)

    def eps(z: np.ndarray, t: int, scale: float) -> np.ndarray:
        tt = np.full(b, t)
        if scale == 1.0:
            return denoiser_forward(store, cfg, z, tt, list(captions), sub, opts).data
        if scale == 0.0:
            return denoiser_forward(store, cfg, z, tt, [NULL_CAPTION] * b, sub, opts).data
        both = denoiser_forward(store, cfg, np.concatenate([z, z]), np.full(2 * b, t),
                                list(captions) + [NULL_CAPTION] * b, sub2, opts).data
        return guided_eps(both[:b], both[b:], scale)

    return eps


def sample(store: ParameterStore, cfg: ModelConfig, schedule: DiffusionSchedule, spec: SampleSpec,
           captions: Sequence[str], layout: Layout | None = None, f: int | None = None,
           use_subject: bool = True, eps_fn=None,
           callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> np.ndarray:
    """Generate latents (b, f, h, w, 4) with guided DDIM (eta = 0) or DDPM.

    ``callback(step_index, z_t, x0_pred)`` observes the trajectory.
    """
    spec.validate(schedule.T)
    b = len(captions)
    if f is None:
        f = len(layout.boxes[0]) if layout is not None else cfg.max_frames
    eps_fn = eps_fn or make_eps_fn(store, cfg, captions, layout, f, use_subject)
    rng = RngStream(spec.seed, "sample")
    z = rng.child("init").normal((b, f, cfg.h, cfg.w, cfg.latent_channels), store.dtype)
    ts = sampling_timesteps(schedule.T, spec.steps)
    for i, t in enumerate(ts):
        e = eps_fn(z, int(t), spec.guidance_scale)
        x0 = predict_x0(z, t, e, schedule)
        if spec.clip_x0 is not None:
            x0 = np.clip(x0, -spec.clip_x0, spec.clip_x0)
            e = (z - np.sqrt(schedule.abar(t)) * x0) / np.sqrt(1.0 - schedule.abar(t))
        if callback:
            callback(i, z, x0)
        if spec.sampler == "ddim":
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
            ab_prev = float(schedule.abar(t_prev))
            z = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * e
        else:
            ab_t = float(schedule.abar(t))
            ab_prev = float(schedule.abar(t - 1))
            beta_t = schedule.beta[t - 1]
            mean = (np.sqrt(ab_prev) * beta_t / (1 - ab_t)) * x0 + \
                   (np.sqrt(schedule.alpha[t - 1]) * (1 - ab_prev) / (1 - ab_t)) * z
            if t > 1:
                var = beta_t * (1 - ab_prev) / (1 - ab_t)
                z = mean + np.sqrt(var) * rng.child(f"noise/{t}").normal(z.shape, z.dtype)
            else:
                z = mean
        z = z.astype(store.dtype, copy=False)
    return z

"""Runs on synthetic stories: datasets, two-stage training and the layout on/off comparison.

For the comparison the same trained model samples every held-out story twice
from identical initial noise: once with the story's layout (boxes, subject
captions and its first frame as reference) and once with the layout toggled
off. Both sample sets are scored with the toy metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import (DiffusionSchedule, SampleSpec, TrainResult, TrainSettings, TrainState,
                        make_schedule, sample, train_stage)
from .errors import CheckpointError, MissingStage1Checkpoint, NoSubject
from .eval import (MetricReport, fid, layout_adherence, recall_at_1, subject_consistency,
                   text_image_similarity, toy_features)
from .layout import BoundingBox
from .model import Layout, ModelConfig, init_params
from .numerics import ParameterStore
from .pipeline.detect import detect_subject_stub
from .pipeline.synthetic import SyntheticConfig, gen_synthetic_stories
from .story import StorySequence

HELDOUT_SEED_OFFSET = 10_000
REFERENCE_SEED_OFFSET = 20_000
N_REFERENCE = 256

# config sections that determine trained weights; a checkpoint must agree on these
WEIGHT_SECTIONS = ("model", "schedule", "training", "data", "seed")


def synthetic_config(run: RunConfig) -> SyntheticConfig:
    d = run.data
    return SyntheticConfig(h=run.model.h, w=run.model.w, frame_counts=tuple(d.frame_counts),
                           radii=tuple(d.radii), noise_std=d.noise_std)


def training_stories(run: RunConfig) -> list[StorySequence]:
    return gen_synthetic_stories(run.data.n_train, synthetic_config(run), run.seed)


def heldout_stories(run: RunConfig, n: int | None = None) -> list[StorySequence]:
    n = run.eval.n_samples if n is None else n
    return gen_synthetic_stories(n, synthetic_config(run), run.seed + HELDOUT_SEED_OFFSET, id_prefix="h")


def reference_stories(run: RunConfig) -> list[StorySequence]:
    return gen_synthetic_stories(N_REFERENCE, synthetic_config(run), run.seed + REFERENCE_SEED_OFFSET,
                                 id_prefix="r")


def schedule_for(run: RunConfig) -> DiffusionSchedule:
    s = run.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def sample_spec(run: RunConfig, seed: int | None = None) -> SampleSpec:
    s = run.sample
    return SampleSpec(s.steps, s.guidance_scale, s.sampler, run.seed if seed is None else seed, s.clip_x0)


def train_settings(run: RunConfig, stage: int) -> TrainSettings:
    t = run.training
    lr, batch, steps = (t.lr, t.batch, t.steps) if stage == 1 else (t.stage2_lr, t.stage2_batch, t.stage2_steps)
    return TrainSettings(lr=lr, weight_decay=t.weight_decay, batch=batch, steps=steps,
                         p_layout=t.p_layout, p_caption=t.p_caption, p_uncond=t.p_uncond,
                         grad_clip=t.grad_clip, checkpoint_every=t.checkpoint_every,
                         log_every=t.log_every)


def weights_echo(run: RunConfig) -> dict:
    full = run.to_dict()
    return {k: full[k] for k in WEIGHT_SECTIONS}


def checkpoint_path(out: str | Path, stage: int) -> Path:
    return Path(out) / "ckpt" / f"stage{stage}.l2s"


def log_path(out: str | Path, stage: int) -> Path:
    return Path(out) / "logs" / f"train_stage{stage}.jsonl"


def store_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig, dtype=np.float32) -> ParameterStore:
    store = init_params(cfg, 0, dtype)
    missing = sorted(set(store.params) - set(ckpt.arrays))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing[:5]}")
    for name, t in store.items():
        if t.data.shape != ckpt.arrays[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {ckpt.arrays[name].shape} "
                                  f"!= model shape {t.data.shape}")
        t.data[...] = ckpt.arrays[name]
    return store


def load_model(out: str | Path, run: RunConfig, stage: int = 2, force: bool = False) -> tuple[ParameterStore, Checkpoint]:
    path = checkpoint_path(out, stage)
    if not path.exists():
        if stage == 1:
            raise MissingStage1Checkpoint(f"no stage-1 checkpoint at {path}; run `l2s train --stage 1` first")
        raise CheckpointError(f"no stage-{stage} checkpoint at {path}; run `l2s train --stage {stage}` first")
    ckpt = load_checkpoint(path, weights_echo(run), force)
    return store_from_checkpoint(ckpt, run.model), ckpt


def run_training(run: RunConfig, stage: int, out: str | Path, dataset: Sequence[StorySequence] | None = None,
                 force: bool = False, should_stop: Callable[[], bool] | None = None) -> TrainResult:
    """Train one stage and keep ``out/ckpt/stage{n}.l2s`` current.

    The checkpoint is rewritten every ``checkpoint_every`` steps and once more
    when the stage ends or ``should_stop`` fires. Stage 2 starts from the
    stage-1 checkpoint in the same directory.
    """
    dataset = training_stories(run) if dataset is None else dataset
    store = None
    if stage == 2:
        store, _ = load_model(out, run, 1, force)
    echo = weights_echo(run)
    ckpt_file = checkpoint_path(out, stage)

    def write(st: ParameterStore, state: TrainState) -> None:
        save_checkpoint(ckpt_file, Checkpoint(echo, stage, state.step, st.arrays()))

    logs = log_path(out, stage)
    logs.parent.mkdir(parents=True, exist_ok=True)
    logs.write_text("")
    return train_stage(stage, dataset, train_settings(run, stage), run.model, store=store, seed=run.seed,
                       log_path=logs, on_checkpoint=write, should_stop=should_stop,
                       schedule=schedule_for(run))


def training_wall_seconds(out: str | Path) -> float:
    total = 0.0
    for stage in (1, 2):
        p = log_path(out, stage)
        if p.exists():
            total += sum(json.loads(line)["wall_ms"] for line in p.read_text().splitlines() if line) / 1e3
    return total


def story_layout(stories: Sequence[StorySequence]) -> Layout:
    return Layout(
        boxes=[list(s.boxes) for s in stories],
        subject_captions=[list(s.subject_captions) for s in stories],
        ref_latent=np.stack([s.frames[s.ref_frame] for s in stories]),
        ref_frame=[s.ref_frame for s in stories],
    )


def detected_boxes(frames: np.ndarray) -> list[BoundingBox]:
    """Detector boxes per frame; a frame without a subject keeps the whole frame."""
    out = []
    for fr in frames:
        try:
            out.append(detect_subject_stub(fr))
        except NoSubject:
            out.append(BoundingBox.full())
    return out


def generate(store: ParameterStore, cfg: ModelConfig, schedule: DiffusionSchedule, spec: SampleSpec,
             stories: Sequence[StorySequence], with_layout: bool, chunk: int = 8,
             use_subject: bool = True) -> np.ndarray:
    """(n, f, h, w, 4) samples; chunk ``j`` draws its initial noise from seed ``spec.seed + j``."""
    out = []
    for j, start in enumerate(range(0, len(stories), chunk)):
        part = stories[start:start + chunk]
        caps = [s.global_caption for s in part]
        layout = story_layout(part) if with_layout else None
        sub_spec = SampleSpec(spec.steps, spec.guidance_scale, spec.sampler, spec.seed + j, spec.clip_x0)
        out.append(sample(store, cfg, schedule, sub_spec, caps, layout, f=part[0].n_frames,
                          use_subject=use_subject))
    return np.concatenate(out)


@dataclass
class ToggleResult:
    report: MetricReport
    samples: dict[str, np.ndarray]
    per_story: dict = field(default_factory=dict)


def layout_toggle_eval(store: ParameterStore, cfg: ModelConfig, schedule: DiffusionSchedule,
                       spec: SampleSpec, heldout: Sequence[StorySequence],
                       reference: Sequence[StorySequence], config_hash: str = "", seed: int = 0,
                       chunk: int = 8, ablate_subject: bool = True) -> ToggleResult:
    lengths = {s.n_frames for s in heldout}
    if len(lengths) != 1:
        raise ValueError("held-out stories must share one length")
    samples = {
        "with_layout": generate(store, cfg, schedule, spec, heldout, True, chunk),
        "without_layout": generate(store, cfg, schedule, spec, heldout, False, chunk),
    }
    if ablate_subject:
        # layout supplied but the subject branch never runs: every injection is zero
        samples["no_subject_branch"] = generate(store, cfg, schedule, spec, heldout, True, chunk,
                                                use_subject=False)
    ref_feats = toy_features(np.concatenate([s.frames for s in reference]))
    report = MetricReport(config_hash, seed)
    per_story = {}
    n = len(heldout)
    for name, gen in samples.items():
        adh = np.array([layout_adherence(gen[i], heldout[i].boxes) for i in range(n)])
        cons = np.array([subject_consistency(gen[i], detected_boxes(gen[i])) for i in range(n)])
        sim = text_image_similarity([s.global_caption for s in heldout], [g[0] for g in gen])
        per_story[name] = {"layout_adherence": adh, "subject_consistency": cons}
        report.add(f"layout_adherence/{name}", adh.mean(), n)
        report.add(f"toy_subject_consistency/{name}", cons.mean(), n)
        report.add(f"toy_fid/{name}", fid(toy_features(gen.reshape(-1, *gen.shape[2:])), ref_feats),
                   gen.shape[0] * gen.shape[1])
        report.add(f"toy_recall_at_1/{name}", recall_at_1(sim), n)
    gt = np.stack([s.frames for s in heldout])
    report.add("layout_adherence/ground_truth",
               np.mean([layout_adherence(s.frames, s.boxes) for s in heldout]), n)
    report.add("toy_fid/ground_truth", fid(toy_features(gt.reshape(-1, *gt.shape[2:])), ref_feats),
               gt.shape[0] * gt.shape[1])
    report.add("random_placement_baseline",
               np.mean([b.area for s in heldout for b in s.boxes]), n)
    return ToggleResult(report, samples, per_story)

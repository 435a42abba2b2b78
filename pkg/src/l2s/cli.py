"""Command-line entry point.

    l2s <gen-data|pipeline|train|sample|eval|check> --config PATH
        [--seed N] [--stage 1|2] [--out DIR] [--force]

Every subcommand prints ``config_hash=<hash>`` first. Exit codes: 0 success,
2 usage error, 3 validation failure, 4 numeric failure. ``L2S_THREADS``
caps the BLAS/OpenMP worker count (default 1, the reference mode).
"""

from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "BLIS_NUM_THREADS", "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def thread_count(env: dict | None = None) -> int:
    raw = (os.environ if env is None else env).get("L2S_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"l2s: L2S_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SystemExit(f"l2s: L2S_THREADS must be a positive integer, got {raw!r}")
    return n


def _limit_threads() -> None:
    # only effective before numpy loads its BLAS, hence at import time
    try:
        n = str(thread_count())
    except SystemExit:
        return
    for var in _THREAD_VARS:
        os.environ[var] = n


_limit_threads()

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import logging  # noqa: E402
import signal  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .config import RunConfig, load_config  # noqa: E402
from .errors import L2SError  # noqa: E402

log = logging.getLogger("l2s")

COMMANDS = ("gen-data", "pipeline", "train", "sample", "eval", "check")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="l2s", description="Layout-togglable storytelling on synthetic stories.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--stage", type=int, choices=(1, 2), default=None,
                   help="training stage (train: default 1; sample/eval: default 2)")
    p.add_argument("--out", default=None, help="run directory (default runs/<config hash>)")
    p.add_argument("--force", action="store_true",
                   help="load checkpoints written with a different config; overwrite outputs")
    return p


def resolve(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else Path("runs") / cfg.hash
    return cfg, out


def err(msg: str) -> None:
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ subcommands

def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    from .pipeline.manifest import ManifestRules, manifest_summary, save_stories
    from .pipeline.records import write_records
    from .pipeline.synthetic import VideoConfig, gen_synthetic_videos
    from .repro import heldout_stories, synthetic_config, training_stories

    data = out / "data"
    prov = {"config_hash": cfg.hash, "seed": cfg.seed, "source": "synthetic"}
    # generated stories have exactly the configured lengths; held-out stories form the bench split
    rules = ManifestRules(cap_per_category=None, allowed_lengths=tuple(sorted(set(cfg.data.frame_counts))))
    train = save_stories(data, "train.jsonl", training_stories(cfg), "train", rules, prov)
    held = save_stories(data, "heldout.jsonl", heldout_stories(cfg), "bench", rules, prov)
    print(manifest_summary(train))
    print(manifest_summary(held))
    vcfg = VideoConfig(n_videos=cfg.data.n_videos, frames_per_video=cfg.data.frames_per_video,
                       blob=synthetic_config(cfg))
    records = gen_synthetic_videos(vcfg, cfg.seed)
    write_records(data / "records.jsonl", records)
    print(f"records: {len(records)} frames from {cfg.data.n_videos} videos -> {data / 'records.jsonl'}")
    return 0


def cmd_pipeline(cfg: RunConfig, out: Path, args) -> int:
    from .pipeline import PipelineSettings, run_pipeline
    from .pipeline.manifest import manifest_summary, write_manifest
    from .pipeline.records import read_records

    src = out / "data" / "records.jsonl"
    if not src.exists():
        err(f"l2s: no frame records at {src}; run `l2s gen-data` first")
        return 3
    p = cfg.pipeline
    settings = PipelineSettings(aes_threshold=p.aes_threshold, length_dist=cfg.length_dist(),
                                length_share=p.length_share, bench_fraction=p.bench_fraction,
                                cap_per_category=p.cap_per_category, kmeans_iters=p.kmeans_iters)
    res = run_pipeline(read_records(src), settings, cfg.seed)
    dest = out / "pipeline"
    write_manifest(dest / "train.jsonl", res.train)
    write_manifest(dest / "bench.jsonl", res.bench)
    print(f"frames: {res.n_input} in, {res.n_kept} kept; clusters: {res.n_clusters}")
    print(manifest_summary(res.train))
    print(manifest_summary(res.bench))
    return 0


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    from .pipeline.manifest import load_stories
    from .repro import checkpoint_path, run_training

    stage = args.stage or 1
    data_file = out / "data" / "train.jsonl"
    dataset = load_stories(data_file) if data_file.exists() else None
    stop = {"flag": False}

    def on_sigint(signum, frame):
        if stop["flag"]:
            raise KeyboardInterrupt
        stop["flag"] = True
        err("l2s: interrupt received; finishing the current step and writing a checkpoint")

    previous = signal.signal(signal.SIGINT, on_sigint)
    try:
        res = run_training(cfg, stage, out, dataset, args.force, should_stop=lambda: stop["flag"])
    finally:
        signal.signal(signal.SIGINT, previous)
    last = res.state.losses[-1] if res.state.losses else float("nan")
    word = "interrupted" if res.interrupted else "finished"
    print(f"stage {stage} {word} at step {res.state.step}; last loss {last:.5f}; "
          f"checkpoint {checkpoint_path(out, stage)}")
    return 0


def cmd_sample(cfg: RunConfig, out: Path, args) -> int:
    from .diffusion import sample
    from .pipeline.records import write_latent
    from .render import render_latent
    from .repro import generate, heldout_stories, load_model, sample_spec, schedule_for

    stage = args.stage or 2
    store, _ = load_model(out, cfg, stage, args.force)
    spec = sample_spec(cfg)
    print(f"steps={spec.steps} guidance={spec.guidance_scale:g}")
    schedule = schedule_for(cfg)
    dest = out / "samples"
    if cfg.sample.prompts:
        f = max(cfg.data.frame_counts)
        z = sample(store, cfg.model, schedule, spec, list(cfg.sample.prompts), None, f=f)
        names = [f"prompt{i:03d}" for i in range(len(z))]
    else:
        stories = heldout_stories(cfg, cfg.eval.sample_batch)
        z = generate(store, cfg.model, schedule, spec, stories, with_layout=stage == 2,
                     chunk=cfg.eval.sample_batch)
        names = [s.story_id for s in stories]
    for name, frames in zip(names, z):
        for k, fr in enumerate(frames):
            write_latent(dest / "latents" / f"{name}_f{k}.l2sa", fr)
        render_latent(frames, dest / "images" / name, scale=8)
    print(f"wrote {len(names)} samples to {dest}")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    from .pipeline.records import read_jsonl
    from .plotting import loss_curves, metric_bars, sample_grid
    from .repro import (heldout_stories, layout_toggle_eval, load_model, log_path, reference_stories,
                        sample_spec, schedule_for)

    stage = args.stage or 2
    store, _ = load_model(out, cfg, stage, args.force)
    spec = sample_spec(cfg)
    print(f"steps={spec.steps} guidance={spec.guidance_scale:g}")
    held = heldout_stories(cfg)
    res = layout_toggle_eval(store, cfg.model, schedule_for(cfg), spec, held, reference_stories(cfg),
                             cfg.hash, cfg.seed, chunk=cfg.eval.sample_batch)
    dest = out / "eval"
    res.report.write(dest / "metrics.jsonl")
    table = res.report.table()
    (dest / "metrics.txt").write_text(table + "\n")
    print(table)
    metric_bars(res.report.rows, dest / "metrics.png", title=f"config {cfg.hash}, seed {cfg.seed}")
    sample_grid({"ground truth": held[0].frames, **{k: v[0] for k, v in res.samples.items()}},
                dest / "samples.png")
    logs = {f"stage {s}": read_jsonl(log_path(out, s)) for s in (1, 2) if log_path(out, s).exists()}
    if logs:
        loss_curves(logs, dest / "loss.png")
    np.savez_compressed(dest / "samples.npz", **res.samples)
    print(f"wrote report to {dest}")
    return 0


def cmd_check(cfg: RunConfig, out: Path, args) -> int:
    from .checks import run_all

    results = run_all()
    for r in results:
        print(r.line(), flush=True)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        err(f"l2s: failed checks: {', '.join(failed)}")
        return 3
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pipeline": cmd_pipeline,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "check": cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        thread_count()
    except SystemExit as exc:
        err(str(exc))
        return 2
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, out = resolve(args)
    except L2SError as exc:
        print("config_hash=invalid", flush=True)
        err(f"l2s: {type(exc).__name__}: {exc}")
        return exc.exit_code
    print(f"config_hash={cfg.hash}", flush=True)
    try:
        code = HANDLERS[args.command](cfg, out, args)
    except L2SError as exc:
        err(f"l2s: {type(exc).__name__}: {exc}")
        return exc.exit_code
    except KeyboardInterrupt:
        err("l2s: interrupted")
        return 130
    sys.stdout.flush()
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()

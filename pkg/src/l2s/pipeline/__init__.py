"""Frame-sequence construction: filter, detect, embed, cluster, group, annotate, split."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..layout import BoundingBox
from ..numerics import RngStream
from .detect import detect_subject_stub, extract_features
from .grouping import DEFAULT_LENGTHS, annotate_stub, group_frames
from .kmeans import ClusterResult, cluster_windows, kmeans
from .manifest import (DatasetManifest, ManifestRules, SequenceEntry, FrameRef, build_manifest,
                       split_by_video)
from .records import FrameRecord, filter_records, validate_spacing

__all__ = [
    "ClusterResult", "DatasetManifest", "FrameRecord", "PipelineSettings", "PipelineResult",
    "annotate_stub", "build_manifest", "cluster_windows", "detect_subject_stub",
    "extract_features", "filter_records", "group_frames", "kmeans", "run_pipeline",
]


@dataclass
class PipelineSettings:
    aes_threshold: float = 4.0
    length_dist: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_LENGTHS))
    length_share: str = "sequences"
    bench_fraction: float = 0.25
    cap_per_category: int = 8
    kmeans_iters: int = 100


@dataclass
class PipelineResult:
    train: DatasetManifest
    bench: DatasetManifest
    n_input: int
    n_kept: int
    n_clusters: int


Detector = Callable[[np.ndarray], BoundingBox]
Embedder = Callable[[np.ndarray, BoundingBox], np.ndarray]
Captioner = Callable[[Sequence[dict]], dict]


def run_pipeline(records: Sequence[FrameRecord], settings: PipelineSettings | None = None,
                 seed: int = 0, detector: Detector | None = None, embedder: Embedder | None = None,
                 captioner: Captioner | None = None) -> PipelineResult:
    """Deterministic in (records, settings, seed); external services may replace the stubs."""
    settings = settings or PipelineSettings()
    detector = detector or detect_subject_stub
    embedder = embedder or extract_features
    captioner = captioner or annotate_stub
    validate_spacing(records)
    kept = filter_records(records, settings.aes_threshold)
    root = RngStream(seed, "pipeline")

    by_video: dict[str, list[FrameRecord]] = {}
    for r in kept:
        by_video.setdefault(r.video_id, []).append(r)

    entries: list[SequenceEntry] = []
    n_clusters = 0
    for vid in sorted(by_video):
        recs = sorted(by_video[vid], key=lambda r: r.frame_index)
        for r in recs:
            if r.bbox is None:
                r.bbox = detector(r.load_latent())
            if r.feature is None:
                r.feature = embedder(r.load_latent(), r.bbox)
        feats = np.stack([r.feature for r in recs])
        for window, res in cluster_windows(feats, seed=seed, max_iters=settings.kmeans_iters):
            for j in range(res.k):
                members = [recs[window[i]] for i in np.flatnonzero(res.assignments == j)]
                if not members:
                    continue
                n_clusters += 1
                rng = root.child(f"{vid}/w{window.start}/c{j}")
                for g, group in enumerate(group_frames(members, rng, settings.length_dist,
                                                       settings.length_share)):
                    metas = [{**r.meta, "box": r.bbox.to_list()} for r in group]
                    caps = captioner(metas)
                    frames = [FrameRef(r.video_id, r.frame_index, r.bbox, cap,
                                       r.latent if isinstance(r.latent, str) else None)
                              for r, cap in zip(group, caps["subject_captions"])]
                    entries.append(SequenceEntry(
                        sequence_id=f"{vid}-w{window.start}-c{j}-g{g}", video_id=vid,
                        category=str(group[0].meta.get("category", vid)),
                        cluster=f"{vid}/w{window.start}/c{j}",
                        global_caption=caps["global_caption"], frames=frames))

    train_seqs, bench_seqs = split_by_video(entries, settings.bench_fraction, root.child("split"))
    train_ids = {s.video_id for s in train_seqs}
    bench_ids = {s.video_id for s in bench_seqs}
    prov = {"seed": seed, "n_input_records": len(records)}
    train = build_manifest(train_seqs, "train",
                           ManifestRules(cap_per_category=None, exclude_video_ids=frozenset(bench_ids)), prov)
    bench = build_manifest(bench_seqs, "bench",
                           ManifestRules(cap_per_category=settings.cap_per_category,
                                         exclude_video_ids=frozenset(train_ids)), prov)
    return PipelineResult(train, bench, len(records), len(kept), n_clusters)

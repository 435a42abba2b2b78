"""Dataset manifests: annotated frame sequences with video-disjoint splits.

A manifest file is line-delimited JSON. The first line is a header
(``"kind": "manifest"``) carrying split, counts, length histogram and
provenance; every following line is one sequence (``"kind": "sequence"``).
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import IoError, SplitLeak, ValidationError
from ..layout import BoundingBox
from ..numerics import RngStream
from ..story import StorySequence
from .records import read_jsonl, read_latent, write_jsonl, write_latent

SPLITS = ("train", "bench")


@dataclass
class FrameRef:
    video_id: str
    frame_index: int
    box: BoundingBox
    subject_caption: str
    latent: str | None = None  # path relative to the manifest file

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "frame_index": self.frame_index,
                "box": self.box.to_list(), "subject_caption": self.subject_caption,
                "latent": self.latent}

    @classmethod
    def from_json(cls, obj: dict) -> "FrameRef":
        return cls(str(obj["video_id"]), int(obj["frame_index"]), BoundingBox.from_list(obj["box"]),
                   str(obj["subject_caption"]), obj.get("latent"))


@dataclass
class SequenceEntry:
    sequence_id: str
    video_id: str
    category: str
    cluster: str
    global_caption: str
    frames: list[FrameRef]
    ref_frame: int = 0

    @property
    def length(self) -> int:
        return len(self.frames)

    def to_json(self) -> dict:
        return {"kind": "sequence", "sequence_id": self.sequence_id, "video_id": self.video_id,
                "category": self.category, "cluster": self.cluster,
                "global_caption": self.global_caption, "ref_frame": self.ref_frame,
                "frames": [fr.to_json() for fr in self.frames]}

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceEntry":
        return cls(str(obj["sequence_id"]), str(obj["video_id"]), str(obj["category"]),
                   str(obj["cluster"]), str(obj["global_caption"]),
                   [FrameRef.from_json(f) for f in obj["frames"]], int(obj.get("ref_frame", 0)))


@dataclass
class ManifestRules:
    cap_per_category: int | None = 8  # applied to the bench split only
    allowed_lengths: tuple[int, ...] = (4, 5, 6)
    exclude_video_ids: frozenset[str] = frozenset()  # video ids owned by the other split


@dataclass
class DatasetManifest:
    split: str
    sequences: list[SequenceEntry]
    provenance: dict = field(default_factory=dict)

    @property
    def n_sets(self) -> int:
        return len(self.sequences)

    @property
    def n_prompts(self) -> int:
        return sum(s.length for s in self.sequences)

    @property
    def length_histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(s.length for s in self.sequences).items()))

    @property
    def video_ids(self) -> set[str]:
        return {s.video_id for s in self.sequences}

    def header(self) -> dict:
        return {"kind": "manifest", "split": self.split, "n_sets": self.n_sets,
                "n_prompts": self.n_prompts,
                "length_histogram": {str(k): v for k, v in self.length_histogram.items()},
                "provenance": self.provenance}


def check_disjoint(a: Iterable[str], b: Iterable[str]) -> None:
    leak = set(a) & set(b)
    if leak:
        raise SplitLeak(leak)


def build_manifest(sequences: Sequence[SequenceEntry], split: str,
                   rules: ManifestRules | None = None, provenance: dict | None = None) -> DatasetManifest:
    rules = rules or ManifestRules()
    if split not in SPLITS:
        raise ValidationError(f"split must be one of {SPLITS}, got {split!r}")
    check_disjoint((s.video_id for s in sequences), rules.exclude_video_ids)
    kept: list[SequenceEntry] = []
    per_cat: Counter = Counter()
    for s in sequences:
        if s.length not in rules.allowed_lengths:
            raise ValidationError(f"sequence {s.sequence_id} has length {s.length}, "
                                  f"allowed {rules.allowed_lengths}")
        if any(fr.video_id != s.video_id for fr in s.frames):
            raise ValidationError(f"sequence {s.sequence_id} mixes videos")
        idx = [fr.frame_index for fr in s.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValidationError(f"sequence {s.sequence_id} is not in temporal order")
        if split == "bench" and rules.cap_per_category is not None:
            if per_cat[s.category] >= rules.cap_per_category:
                continue
            per_cat[s.category] += 1
        kept.append(s)
    prov = dict(provenance or {})
    prov["video_ids"] = sorted({s.video_id for s in kept})
    return DatasetManifest(split, kept, prov)


def split_by_video(sequences: Sequence[SequenceEntry], bench_fraction: float,
                   rng: RngStream) -> tuple[list[SequenceEntry], list[SequenceEntry]]:
    """Assign whole videos to train or bench."""
    videos = sorted({s.video_id for s in sequences})
    order = rng.permutation(len(videos))
    n_bench = int(round(bench_fraction * len(videos)))
    bench_ids = {videos[i] for i in order[:n_bench]}
    train = [s for s in sequences if s.video_id not in bench_ids]
    bench = [s for s in sequences if s.video_id in bench_ids]
    return train, bench


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    write_jsonl(path, [manifest.header(), *(s.to_json() for s in manifest.sequences)])


def read_manifest(path: str | Path) -> DatasetManifest:
    rows = read_jsonl(path)
    if not rows or rows[0].get("kind") != "manifest":
        raise IoError(f"{path}: first line is not a manifest header")
    head = rows[0]
    seqs = [SequenceEntry.from_json(r) for r in rows[1:]]
    m = DatasetManifest(head["split"], seqs, head.get("provenance", {}))
    if m.n_sets != head["n_sets"] or m.n_prompts != head["n_prompts"]:
        raise IoError(f"{path}: header counts disagree with body")
    return m


def story_entry(story: StorySequence, latent_paths: Sequence[str] | None = None,
                category: str = "synthetic") -> SequenceEntry:
    paths = list(latent_paths) if latent_paths is not None else [None] * story.n_frames
    frames = [FrameRef(story.video_id, k, story.boxes[k], story.subject_captions[k], paths[k])
              for k in range(story.n_frames)]
    return SequenceEntry(story.story_id, story.video_id, category, story.story_id,
                         story.global_caption, frames, story.ref_frame)


def save_stories(root: str | Path, name: str, stories: Sequence[StorySequence], split: str,
                 rules: ManifestRules | None = None, provenance: dict | None = None) -> DatasetManifest:
    """Write latents under ``root/latents`` and the manifest at ``root/name``."""
    root = Path(root)
    entries = []
    for s in stories:
        paths = []
        for k in range(s.n_frames):
            rel = f"latents/{s.story_id}_f{k}.l2sa"
            write_latent(root / rel, s.frames[k])
            paths.append(rel)
        entries.append(story_entry(s, paths, category=s.meta.get("category", "synthetic")))
    manifest = build_manifest(entries, split, rules, provenance)
    write_manifest(root / name, manifest)
    return manifest


def load_stories(path: str | Path) -> list[StorySequence]:
    path = Path(path)
    m = read_manifest(path)
    out = []
    for s in m.sequences:
        frames = np.stack([read_latent(path.parent / fr.latent) for fr in s.frames])
        out.append(StorySequence(frames, s.global_caption, [fr.subject_caption for fr in s.frames],
                                 [fr.box for fr in s.frames], s.ref_frame, s.sequence_id, s.video_id,
                                 {"category": s.category, "cluster": s.cluster}))
    return out


def manifest_summary(m: DatasetManifest) -> str:
    hist = ", ".join(f"{k}:{v}" for k, v in m.length_histogram.items())
    return json.dumps({"split": m.split, "n_sets": m.n_sets, "n_prompts": m.n_prompts}) + f" lengths {{{hist}}}"

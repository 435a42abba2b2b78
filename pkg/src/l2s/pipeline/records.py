"""Frame records, raw latent files and line-delimited serialisation.

Latent files hold one frame: a 16-byte header (``b"L2SA"`` followed by
little-endian uint32 h, w, c) and then h*w*c little-endian float32 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import IoError, MissingScore, ValidationError
from ..layout import BoundingBox

LATENT_MAGIC = b"L2SA"
MIN_SPACING_S = 4.0  # 0.25 frames per second


def write_latent(path: str | Path, latent: np.ndarray) -> None:
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise ValueError(f"latent must be (h, w, c); got {latent.shape}")
    h, w, c = latent.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(LATENT_MAGIC + struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(latent, dtype="<f4").tobytes())


def read_latent(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read latent {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != LATENT_MAGIC:
        raise IoError(f"{path} is not an L2SA latent file")
    h, w, c = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != 4 * h * w * c:
        raise IoError(f"{path}: header says {h}x{w}x{c} but body has {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)


@dataclass
class FrameRecord:
    video_id: str
    frame_index: int
    timestamp_s: float
    latent: np.ndarray | str | None = None  # array or path relative to the record file
    aesthetic_score: float | None = None
    nsfw: bool | None = None
    bbox: BoundingBox | None = None
    feature: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timestamp_s < 0:
            raise ValidationError(f"{self.video_id}#{self.frame_index}: negative timestamp")

    def load_latent(self, root: str | Path | None = None) -> np.ndarray:
        if isinstance(self.latent, np.ndarray):
            return self.latent
        if self.latent is None:
            raise IoError(f"{self.video_id}#{self.frame_index} has no latent")
        path = Path(self.latent)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        arr = read_latent(path)
        self.latent = arr
        return arr

    def to_json(self, latent_path: str | None = None) -> dict:
        latent = latent_path if latent_path is not None else (self.latent if isinstance(self.latent, str) else None)
        return {
            "video_id": self.video_id,
            "frame_index": int(self.frame_index),
            "timestamp_s": float(self.timestamp_s),
            "latent": latent,
            "aesthetic_score": None if self.aesthetic_score is None else float(self.aesthetic_score),
            "nsfw": self.nsfw,
            "bbox": None if self.bbox is None else self.bbox.to_list(),
            "feature": None if self.feature is None else [float(v) for v in self.feature],
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FrameRecord":
        return cls(
            video_id=str(obj["video_id"]),
            frame_index=int(obj["frame_index"]),
            timestamp_s=float(obj["timestamp_s"]),
            latent=obj.get("latent"),
            aesthetic_score=obj.get("aesthetic_score"),
            nsfw=obj.get("nsfw"),
            bbox=None if obj.get("bbox") is None else BoundingBox.from_list(obj["bbox"]),
            feature=None if obj.get("feature") is None else np.asarray(obj["feature"], dtype=np.float64),
            meta=obj.get("meta") or {},
        )


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"{path}: malformed line: {exc}") from exc


def write_records(path: str | Path, records: Sequence[FrameRecord], latent_dir: str = "latents") -> None:
    """Write records plus one latent file per in-memory latent."""
    path = Path(path)
    rows = []
    for r in records:
        rel = None
        if isinstance(r.latent, np.ndarray):
            rel = f"{latent_dir}/{r.video_id}/{r.frame_index:06d}.l2sa"
            write_latent(path.parent / rel, r.latent)
        rows.append(r.to_json(rel))
    write_jsonl(path, rows)


def read_records(path: str | Path, load: bool = True) -> list[FrameRecord]:
    path = Path(path)
    recs = [FrameRecord.from_json(o) for o in read_jsonl(path)]
    if load:
        for r in recs:
            if r.latent is not None:
                r.load_latent(path.parent)
    return recs


def validate_spacing(records: Sequence[FrameRecord]) -> None:
    """Consecutive sampled frames of a video must be at least 4 s apart."""
    by_video: dict[str, list[FrameRecord]] = {}
    for r in records:
        by_video.setdefault(r.video_id, []).append(r)
    for vid, rs in by_video.items():
        rs = sorted(rs, key=lambda r: r.frame_index)
        for a, b in zip(rs, rs[1:]):
            if b.timestamp_s - a.timestamp_s < MIN_SPACING_S - 1e-9:
                raise ValidationError(
                    f"video {vid}: frames {a.frame_index} and {b.frame_index} are "
                    f"{b.timestamp_s - a.timestamp_s:.3f} s apart (< {MIN_SPACING_S} s)")


def filter_records(records: Sequence[FrameRecord], aes_threshold: float) -> list[FrameRecord]:
    """Drop NSFW frames and frames scoring below the aesthetic threshold."""
    for r in records:
        if r.aesthetic_score is None or r.nsfw is None:
            raise MissingScore(f"{r.video_id}#{r.frame_index} lacks aesthetic/nsfw scores")
    return [r for r in records if not r.nsfw and r.aesthetic_score >= aes_threshold]

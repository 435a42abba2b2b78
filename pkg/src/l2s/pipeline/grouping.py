"""Probabilistic grouping of cluster members and caption assembly."""

from __future__ import annotations

from typing import Mapping, Sequence, TypeVar

import numpy as np

from ..errors import MissingMetadata
from ..layout import BoundingBox
from ..numerics import RngStream

T = TypeVar("T")

DEFAULT_LENGTHS: dict[int, float] = {4: 0.5, 5: 0.3, 6: 0.2}
CAPTION_SEPARATOR = " | "  # global caption = identity prompt + separator + frame prompt
_REQUIRED = ("color", "size", "box", "motion")


def sequence_probs(length_dist: Mapping[int, float], share: str = "sequences") -> dict[int, float]:
    """Per-draw probabilities.

    ``share="sequences"`` uses the distribution as given. ``share="frames"``
    reads it as the fraction of *frames* that should land in sequences of
    each length and converts it to per-draw probabilities (p_L ∝ share_L / L).
    """
    total = sum(length_dist.values())
    if abs(total - 1.0) > 1e-9 or any(v < 0 for v in length_dist.values()):
        raise ValueError(f"length distribution must be non-negative and sum to 1, got {dict(length_dist)}")
    if share == "sequences":
        return {int(k): float(v) for k, v in length_dist.items()}
    if share == "frames":
        raw = {int(k): v / k for k, v in length_dist.items()}
        z = sum(raw.values())
        return {k: v / z for k, v in raw.items()}
    raise ValueError(f"share must be 'sequences' or 'frames', got {share!r}")


def group_frames(members: Sequence[T], rng: RngStream,
                 length_dist: Mapping[int, float] | None = None,
                 share: str = "sequences") -> list[list[T]]:
    """Greedily cut temporally ordered members into sequences of drawn lengths.

    A drawn length that exceeds what remains is redrawn from the distribution
    restricted to lengths that still fit. Leftovers shorter than the smallest
    length are dropped.
    """
    probs = sequence_probs(length_dist or DEFAULT_LENGTHS, share)
    lengths = np.array(sorted(probs), dtype=np.int64)
    p = np.array([probs[int(k)] for k in lengths])
    out: list[list[T]] = []
    pos, n = 0, len(members)
    while n - pos >= lengths.min():
        fits = lengths <= n - pos
        q = np.where(fits, p, 0.0)
        if q.sum() <= 0:
            break
        L = int(rng.choice(lengths, p=q / q.sum()))
        out.append(list(members[pos:pos + L]))
        pos += L
    return out


def _quadrant(box: BoundingBox) -> str:
    cx, cy = box.center
    return f"{'top' if cy < 0.5 else 'bottom'}-{'left' if cx < 0.5 else 'right'}"


def annotate_stub(frame_metas: Sequence[Mapping]) -> dict:
    """Template captions from generator metadata.

    The global caption is ``"<identity prompt> | <frame prompt>"``; subject
    captions name the blob and the quadrant of its box.
    """
    if not frame_metas:
        raise MissingMetadata("no frames to annotate")
    for i, m in enumerate(frame_metas):
        missing = [k for k in _REQUIRED if k not in m]
        if missing:
            raise MissingMetadata(f"frame {i} lacks metadata {missing}")
    first = frame_metas[0]
    identity = f"a {first['size']} {first['color']} blob"
    frame_prompt = f"{first['motion']} across the scene"
    subject = []
    for m in frame_metas:
        box = BoundingBox.from_list(m["box"])
        subject.append(f"{m['size']} {m['color']} blob in the {_quadrant(box)}")
    return {"global_caption": identity + CAPTION_SEPARATOR + frame_prompt, "subject_captions": subject}


def split_global_caption(caption: str) -> tuple[str, str]:
    identity, sep, frame = caption.partition(CAPTION_SEPARATOR)
    if not sep:
        raise ValueError(f"caption {caption!r} lacks the {CAPTION_SEPARATOR!r} separator")
    return identity, frame

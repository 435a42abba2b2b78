"""Bounding boxes, rasterised masks and the additive attention biases.

Masking is key-side: every query may attend, but only to keys inside the
subject region. Consequently the per-frame self bias and the cross-frame
temporal bias are fully described by one boolean raster per frame, which is
what :class:`AttentionBiasSet` stores. The dense tensors are materialised on
demand for reference computations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CaptionTooLong, EmptyMask, InvalidBox, ShapeMismatch
from .numerics import NEG_LARGE, RngStream

TOKEN_CAP = 120


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite coordinate in {vals}")
        if not (0.0 <= self.x0 <= self.x1 <= 1.0 and 0.0 <= self.y0 <= self.y1 <= 1.0):
            raise InvalidBox(f"box {vals} violates 0 <= x0 <= x1 <= 1, 0 <= y0 <= y1 <= 1")

    @classmethod
    def full(cls) -> "BoundingBox":
        return cls(0.0, 0.0, 1.0, 1.0)

    @classmethod
    def from_list(cls, vals: Sequence[float]) -> "BoundingBox":
        if len(vals) != 4:
            raise InvalidBox(f"expected four coordinates, got {list(vals)}")
        return cls(*(float(v) for v in vals))

    def to_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0


@dataclass
class RasterMask:
    grid: np.ndarray  # (h, w) of {0, 1}
    frame_index: int = 0

    @property
    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1).astype(bool)


def rasterize_bbox(box: BoundingBox | None, h: int, w: int, frame_index: int = 0) -> RasterMask:
    """Cell (i, j) is set iff its centre lies in the box.

    A box that covers no cell centre collapses to the cell holding the box
    centre; a missing box (``None``) means the whole frame.
    """
    if h < 1 or w < 1:
        raise ValueError("raster dimensions must be positive")
    if box is None:
        return RasterMask(np.ones((h, w), dtype=np.uint8), frame_index)
    if not isinstance(box, BoundingBox):
        box = BoundingBox.from_list(box)
    cx = (np.arange(w) + 0.5) / w
    cy = (np.arange(h) + 0.5) / h
    inx = (cx >= box.x0) & (cx <= box.x1)
    iny = (cy >= box.y0) & (cy <= box.y1)
    grid = (iny[:, None] & inx[None, :]).astype(np.uint8)
    if not grid.any():
        bx, by = box.center
        grid[min(int(by * h), h - 1), min(int(bx * w), w - 1)] = 1
    return RasterMask(grid, frame_index)


def _raster_stack(masks, b: int | None = None, f: int | None = None) -> np.ndarray:
    """Normalise masks to a bool array (b, f, hw)."""
    if isinstance(masks, np.ndarray):
        arr = masks
    else:
        rows = masks if masks and isinstance(masks[0], (list, tuple)) else [masks]
        arr = np.stack([np.stack([m.grid if isinstance(m, RasterMask) else m for m in row]) for row in rows])
    arr = np.asarray(arr)
    if arr.ndim == 4:
        arr = arr.reshape(arr.shape[0], arr.shape[1], -1)
    if arr.ndim != 3:
        raise ShapeMismatch(f"masks must be (b, f, h, w) or (b, f, hw); got {arr.shape}")
    arr = arr.astype(bool)
    if b is not None and arr.shape[0] == 1 and b > 1:
        arr = np.repeat(arr, b, axis=0)
    if b is not None and arr.shape[0] != b or f is not None and arr.shape[1] != f:
        raise ShapeMismatch(f"masks shaped {arr.shape[:2]}, expected {(b, f)}")
    if not arr.any(axis=-1).all():
        raise EmptyMask("a frame mask has no valid cell")
    return arr


def _bias_from_keys(keys: np.ndarray, n_queries: int, dtype) -> np.ndarray:
    # keys (..., n_keys) bool -> (..., n_queries, n_keys) of {0, -NEG_LARGE}
    row = np.where(keys, 0.0, -NEG_LARGE).astype(dtype)
    return np.broadcast_to(row[..., None, :], row.shape[:-1] + (n_queries, row.shape[-1])).copy()


def build_self_bias(masks, b: int | None = None, f: int | None = None, h: int | None = None,
                    w: int | None = None, dtype=np.float64) -> np.ndarray:
    """Per-frame key-side bias, shape (b, f, hw, hw)."""
    keys = _raster_stack(masks, b, f)
    if h is not None and w is not None and keys.shape[-1] != h * w:
        raise ShapeMismatch(f"masks have {keys.shape[-1]} cells, expected {h * w}")
    return _bias_from_keys(keys, keys.shape[-1], dtype)


def build_cross_bias(masks, caption_len: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Cross-attention bias (b, f, hw, l) and the bypass flags (b, f, hw).

    In-box rows attend to every caption token; out-of-box rows are flagged
    and skip cross-attention entirely instead of receiving a dead row.
    """
    if caption_len < 1:
        raise ValueError("caption length must be at least 1")
    if caption_len > TOKEN_CAP:
        raise CaptionTooLong(f"caption has {caption_len} tokens; the cap is {TOKEN_CAP}")
    keys = _raster_stack(masks)
    bias = np.zeros(keys.shape + (caption_len,), dtype=dtype)
    return bias, ~keys


def build_temporal_bias(masks, dtype=np.float64) -> np.ndarray:
    """Cross-frame key-side bias, shape (b, f*hw, f*hw)."""
    keys = _raster_stack(masks)
    b, f, hw = keys.shape
    return _bias_from_keys(keys.reshape(b, f * hw), f * hw, dtype)


@dataclass
class AttentionBiasSet:
    """The three layout biases in compact form.

    ``keys`` (b, f, hw) marks the cells inside each frame's box. The dense
    tensors are derived properties and are exactly what the attention kernels
    see when run in dense mode.
    """

    keys: np.ndarray
    caption_len: int = 1
    dtype: object = np.float64

    @classmethod
    def from_masks(cls, masks, caption_len: int = 1, dtype=np.float64) -> "AttentionBiasSet":
        if caption_len > TOKEN_CAP:
            raise CaptionTooLong(f"caption has {caption_len} tokens; the cap is {TOKEN_CAP}")
        return cls(_raster_stack(masks), caption_len, dtype)

    @classmethod
    def all_valid(cls, b: int, f: int, hw: int, caption_len: int = 1, dtype=np.float64) -> "AttentionBiasSet":
        return cls(np.ones((b, f, hw), dtype=bool), caption_len, dtype)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.keys.shape

    @property
    def self_bias(self) -> np.ndarray:
        return _bias_from_keys(self.keys, self.keys.shape[-1], self.dtype)

    @property
    def cross_bias(self) -> np.ndarray:
        return np.zeros(self.keys.shape + (self.caption_len,), dtype=self.dtype)

    @property
    def bypass(self) -> np.ndarray:
        return ~self.keys

    @property
    def temporal_bias(self) -> np.ndarray:
        b, f, hw = self.keys.shape
        return _bias_from_keys(self.keys.reshape(b, f * hw), f * hw, self.dtype)

    def sample_is_all_valid(self) -> np.ndarray:
        return self.keys.reshape(self.keys.shape[0], -1).all(axis=-1)


def apply_layout_dropout(biases: AttentionBiasSet, p: float, rng: RngStream,
                         sample_ids: Sequence | None = None) -> tuple[AttentionBiasSet, np.ndarray]:
    """Replace whole samples' layouts by all-valid ones with probability ``p``.

    The decision for sample ``i`` is drawn from ``rng.child(sample_ids[i])``
    so it does not depend on batch order. Returns the new set and the boolean
    per-sample decision vector.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    b = biases.keys.shape[0]
    ids = range(b) if sample_ids is None else sample_ids
    dropped = np.array([rng.child(sid).random() < p for sid in ids], dtype=bool)
    if not dropped.any():
        return biases, dropped
    keys = biases.keys.copy()
    keys[dropped] = True
    return AttentionBiasSet(keys, biases.caption_len, biases.dtype), dropped

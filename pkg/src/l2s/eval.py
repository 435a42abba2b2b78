"""Toy evaluation metrics: FID, Recall@1, subject consistency and layout adherence.

The consistency and retrieval scores here are toy analogues built on a fixed
pooling feature, not perceptual-model scores, and are labelled as such in
every report.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateInput, NoSubject, NotSquare, ShapeMismatch, TooFewFrames
from .layout import BoundingBox, rasterize_bbox

GRID = 4
FID_EPS = 1e-10


def _edges(n: int) -> np.ndarray:
    return np.round(np.linspace(0, n, GRID + 1)).astype(int)


def toy_features(frames: np.ndarray, boxes: Sequence[BoundingBox | None] | None = None,
                 mode: str = "full") -> np.ndarray:
    """(n, h, w, c) frames -> (n, 4*4*c) cell means over a 4x4 grid.

    Subject mode zeroes every cell whose centre lies outside the frame's box
    before pooling.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ShapeMismatch(f"frames must be (n, h, w, c); got {x.shape}")
    n, h, w, _ = x.shape
    if mode == "subject":
        if boxes is None or len(boxes) != n:
            raise ShapeMismatch(f"subject mode needs one box per frame ({n})")
        keep = np.stack([rasterize_bbox(b, h, w).grid for b in boxes]).astype(np.float64)
        x = x * keep[..., None]
    elif mode != "full":
        raise ValueError(f"mode must be 'full' or 'subject', got {mode!r}")
    ye, xe = _edges(h), _edges(w)
    pooled = np.stack([
        np.stack([x[:, ye[i]:ye[i + 1], xe[j]:xe[j + 1], :].mean(axis=(1, 2)) for j in range(GRID)], axis=1)
        for i in range(GRID)], axis=1)  # (n, 4, 4, c)
    return pooled.reshape(n, -1)


def _sym_sqrt(m: np.ndarray, eps: float = 0.0) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    vals = np.clip(vals, 0.0, None) + eps
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def _nuclear(m: np.ndarray) -> float:
    return float(np.linalg.svd(m, compute_uv=False).sum())


def fid(a: np.ndarray, b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Both covariances are unbiased and get FID_EPS added to their eigenvalues
    (a shift of eps*I) before square roots are taken. The cross term
    tr sqrt(Ca^1/2 Cb Ca^1/2) is the sum of singular values of Ca^1/2 Cb^1/2;
    that form stays accurate for near-null directions, and averaging it over
    both orders makes the result exactly symmetric. Rounding can leave a
    tiny negative value, which is clipped to 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature sets must be (n, d) with equal d; got {a.shape}, {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DegenerateInput(f"need at least 2 rows per set, got {a.shape[0]} and {b.shape[0]}")
    d = a.shape[1]
    mu = a.mean(axis=0) - b.mean(axis=0)
    ca = np.cov(a, rowvar=False).reshape(d, d)
    cb = np.cov(b, rowvar=False).reshape(d, d)
    sa = _sym_sqrt(ca, FID_EPS)
    sb = _sym_sqrt(cb, FID_EPS)
    cross = 0.5 * (_nuclear(sa @ sb) + _nuclear(sb @ sa))
    traces = (np.trace(ca) + np.trace(cb)) + 2.0 * d * FID_EPS
    return max(0.0, float(mu @ mu + (traces - 2.0 * cross)))


def recall_at_1(sim: np.ndarray) -> float:
    """Fraction of rows whose diagonal entry strictly beats every other column."""
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise NotSquare(f"similarity matrix must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("similarity matrix has non-finite entries")
    n = s.shape[0]
    if n == 0:
        raise DegenerateInput("empty similarity matrix")
    diag = np.diag(s)
    others = np.where(np.eye(n, dtype=bool), -np.inf, s)
    return float(np.mean(diag > others.max(axis=1)))


def _cosine_matrix(feats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    u = feats / safe[:, None]
    return u @ u.T


def consistency_from_features(feats: np.ndarray) -> float:
    f = feats.shape[0]
    if f < 2:
        raise TooFewFrames(f"consistency needs at least 2 frames, got {f}")
    cos = _cosine_matrix(feats)
    iu = np.triu_indices(f, k=1)
    return float(cos[iu].mean())


def subject_consistency(latents: np.ndarray, boxes: Sequence[BoundingBox]) -> float:
    """Mean pairwise cosine similarity of background-suppressed features (toy)."""
    latents = np.asarray(latents)
    if latents.shape[0] < 2:
        raise TooFewFrames(f"consistency needs at least 2 frames, got {latents.shape[0]}")
    return consistency_from_features(toy_features(latents, boxes, mode="subject"))


def layout_adherence(latents: np.ndarray, boxes: Sequence[BoundingBox]) -> float:
    """Fraction of frames whose detected subject centre lies in the conditioned box."""
    from .pipeline.detect import detect_subject_stub

    latents = np.asarray(latents)
    if latents.shape[0] < 1 or len(boxes) != latents.shape[0]:
        raise ShapeMismatch(f"need one box per frame; got {latents.shape[0]} frames, {len(boxes)} boxes")
    hits = 0
    for frame, box in zip(latents, boxes):
        try:
            det = detect_subject_stub(frame)
        except NoSubject:
            continue
        hits += box.contains(*det.center)
    return hits / latents.shape[0]


# toy text-image similarity for retrieval

def caption_vector(caption: str) -> np.ndarray:
    """Expected mean colour channels named by a caption (zeros if none is named)."""
    from .pipeline.synthetic import PALETTE

    words = caption.lower().replace("|", " ").split()
    hits = [PALETTE[wd] for wd in words if wd in PALETTE]
    return np.mean(hits, axis=0) if hits else np.zeros(3)


def image_vector(latent: np.ndarray) -> np.ndarray:
    """Channel-0-weighted mean of the colour channels."""
    x = np.asarray(latent, dtype=np.float64)
    wgt = np.clip(x[..., 0], 0.0, None)
    if wgt.sum() <= 0:
        return np.zeros(x.shape[-1] - 1)
    return (x[..., 1:] * wgt[..., None]).sum(axis=(0, 1)) / wgt.sum()


def text_image_similarity(captions: Sequence[str], latents: Sequence[np.ndarray]) -> np.ndarray:
    t = np.stack([caption_vector(c) for c in captions])
    v = np.stack([image_vector(x) for x in latents])
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    vn = np.linalg.norm(v, axis=1, keepdims=True)
    return (t / np.where(tn > 0, tn, 1.0)) @ (v / np.where(vn > 0, vn, 1.0)).T


# reports

@dataclass
class MetricReport:
    config_hash: str
    seed: int
    rows: list[dict] = field(default_factory=list)

    def add(self, metric: str, value: float, n: int) -> None:
        self.rows.append({"metric": metric, "value": float(value), "n": int(n),
                          "config_hash": self.config_hash, "seed": int(self.seed)})

    def value(self, metric: str) -> float:
        for r in self.rows:
            if r["metric"] == metric:
                return r["value"]
        raise KeyError(metric)

    def table(self) -> str:
        width = max([len(r["metric"]) for r in self.rows] + [6])
        lines = [f"{'metric':<{width}}  {'value':>12}  {'n':>6}", "-" * (width + 22)]
        lines += [f"{r['metric']:<{width}}  {r['value']:>12.6f}  {r['n']:>6d}" for r in self.rows]
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        from .pipeline.records import write_jsonl

        write_jsonl(path, self.rows)

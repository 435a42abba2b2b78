"""K-means with k-means++ seeding and windowed clustering of video frames."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import TooFewPoints
from ..numerics import RngStream

WINDOW = 150
K_FULL = 12
K_PARTIAL = 6


@dataclass
class ClusterResult:
    assignments: np.ndarray  # (n,) int
    centers: np.ndarray  # (k, d)
    inertia: float
    iterations_run: int

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])


def sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus(x: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(0, n))]
    d2 = sq_dists(x, x[idx])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:  # every point coincides with a chosen centre
            nxt = int(rng.integers(0, n))
        idx.append(nxt)
        d2 = np.minimum(d2, sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[idx].copy()


def _lloyd(x: np.ndarray, centers: np.ndarray, max_iters: int) -> ClusterResult:
    k = centers.shape[0]
    d = sq_dists(x, centers)
    assign = np.argmin(d, axis=1)  # first minimum, i.e. lowest index on ties
    inertia = float(d[np.arange(len(x)), assign].sum())
    it = 0
    for it in range(1, max_iters + 1):
        new_centers = np.empty_like(centers)
        own = d[np.arange(len(x)), assign]
        taken = np.zeros(len(x), dtype=bool)
        for j in range(k):
            members = assign == j
            if members.any():
                new_centers[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(np.where(taken, -np.inf, own)))
                taken[far] = True
                new_centers[j] = x[far]
        d = sq_dists(x, new_centers)
        new_assign = np.argmin(d, axis=1)
        new_inertia = float(d[np.arange(len(x)), new_assign].sum())
        assert new_inertia <= inertia * (1 + 1e-12) + 1e-12, (
            f"inertia increased at iteration {it}: {inertia} -> {new_inertia}")
        centers, inertia = new_centers, new_inertia
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return ClusterResult(assign.astype(np.int64), centers, inertia, it)


def _hartigan(x: np.ndarray, res: ClusterResult, max_sweeps: int = 100) -> ClusterResult:
    """Single-point moves that lower inertia once cluster means are updated.

    Every Hartigan fixpoint is also a Lloyd fixpoint, but not conversely, so
    this escapes some of the local minima Lloyd stops in.
    """
    assign = res.assignments.copy()
    k = res.k
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    centers = np.stack([x[assign == j].mean(axis=0) if counts[j] else res.centers[j] for j in range(k)])
    moved_any = False
    for _ in range(max_sweeps):
        moved = False
        for i in range(len(x)):
            a = assign[i]
            if counts[a] <= 1:
                continue
            d = ((centers - x[i]) ** 2).sum(axis=1)
            gain_out = counts[a] / (counts[a] - 1) * d[a]
            cost_in = counts / (counts + 1) * d
            cost_in[a] = np.inf
            b = int(np.argmin(cost_in))
            if cost_in[b] < gain_out * (1 - 1e-12) - 1e-15:
                centers[a] = (centers[a] * counts[a] - x[i]) / (counts[a] - 1)
                centers[b] = (centers[b] * counts[b] + x[i]) / (counts[b] + 1)
                counts[a] -= 1
                counts[b] += 1
                assign[i] = b
                moved = moved_any = True
        if not moved:
            break
    if not moved_any:
        return res
    refined = _lloyd(x, centers, 100)
    refined.iterations_run += res.iterations_run
    return refined


def kmeans(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
           n_init: int = 8) -> ClusterResult:
    """Best of ``n_init`` seeded k-means++ / Lloyd runs (lowest inertia, first on ties)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (n, d); got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    if k < 1 or x.shape[0] < k:
        raise TooFewPoints(f"need n >= k >= 1, got n={x.shape[0]}, k={k}")
    root = RngStream(seed, "kmeans")
    best = None
    for r in range(max(1, n_init)):
        res = _lloyd(x, _plusplus(x, k, root.child(f"init{r}")), max_iters)
        res = _hartigan(x, res)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def window_k(n: int) -> int:
    k = K_FULL if n >= WINDOW else K_PARTIAL
    return min(k, n)


def cluster_windows(features: Sequence[np.ndarray] | np.ndarray, seed: int = 0,
                    max_iters: int = 100) -> list[tuple[range, ClusterResult]]:
    """Cluster consecutive windows of 150 frames; returns (index range, result) pairs."""
    x = np.asarray(features, dtype=np.float64)
    out = []
    for start in range(0, len(x), WINDOW):
        stop = min(start + WINDOW, len(x))
        res = kmeans(x[start:stop], window_k(stop - start), max_iters=max_iters, seed=seed + start)
        out.append((range(start, stop), res))
    return out

"""Subject detection and clustering features for synthetic latents."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import NoSubject
from ..layout import BoundingBox

FEATURE_DIM = 64
_CROP = 8  # crops are resampled to _CROP x _CROP cells before projection


def detect_subject_stub(latent: np.ndarray) -> BoundingBox:
    """Tight normalised box of the largest above-half-max region of channel 0.

    Components use 4-connectivity; equal-size components resolve to the one
    whose first cell comes first in row-major order.
    """
    latent = np.asarray(latent)
    if not np.all(np.isfinite(latent)):
        raise ValueError("latent contains non-finite values")
    mag = np.abs(latent[..., 0])
    peak = mag.max()
    if peak <= 0.0:
        raise NoSubject("channel 0 is uniformly zero")
    labels, n = ndimage.label(mag >= 0.5 * peak)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = -1
    best = int(np.argmax(sizes))
    ys, xs = np.nonzero(labels == best)
    h, w = mag.shape
    return BoundingBox(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)


def _crop_cells(latent: np.ndarray, box: BoundingBox) -> np.ndarray:
    h, w, _ = latent.shape
    x0 = min(int(np.floor(box.x0 * w)), w - 1)
    y0 = min(int(np.floor(box.y0 * h)), h - 1)
    x1 = max(int(np.ceil(box.x1 * w)), x0 + 1)
    y1 = max(int(np.ceil(box.y1 * h)), y0 + 1)
    crop = latent[y0:y1, x0:x1, :]
    # nearest-neighbour resample to a fixed grid
    ri = (np.arange(_CROP) * crop.shape[0]) // _CROP
    ci = (np.arange(_CROP) * crop.shape[1]) // _CROP
    return crop[ri][:, ci]


def projection_matrix(channels: int = 4, seed: int = 0) -> np.ndarray:
    g = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x4C3253])))
    d_in = _CROP * _CROP * channels
    return g.standard_normal((d_in, FEATURE_DIM)) / np.sqrt(d_in)


def extract_features(latent: np.ndarray, box: BoundingBox, seed: int = 0) -> np.ndarray:
    """Fixed random projection of the subject crop to 64 dimensions."""
    latent = np.asarray(latent, dtype=np.float64)
    crop = _crop_cells(latent, box).reshape(-1)
    return crop @ projection_matrix(latent.shape[-1], seed)

"""Latent frames as binary PPM (P6) images."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import IoError


def quantize(frames: np.ndarray) -> np.ndarray:
    """Map channels 0-2 of (..., h, w, c) onto 0..255 using the min/max over the whole batch.

    A constant batch maps to mid grey (128).
    """
    x = np.asarray(frames, dtype=np.float64)[..., :3]
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot render non-finite latents")
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.rint((x - lo) * (255.0 / (hi - lo))).clip(0, 255).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(rgb).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_ppm(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    # header: magic, width, height, maxval, then exactly one whitespace byte
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise IoError(f"{path} is not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = raw[m.end():]
    if len(pixels) != w * h * 3:
        raise IoError(f"{path}: expected {w * h * 3} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


def render_latent(frames: np.ndarray, stem: str | Path, scale: int = 1) -> list[Path]:
    """Write ``{stem}_f{index}.ppm`` for each frame of an (f, h, w, c) stack.

    ``scale`` enlarges each latent cell to a scale x scale pixel block.
    """
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    rgb = quantize(frames)
    if scale > 1:
        rgb = rgb.repeat(scale, axis=1).repeat(scale, axis=2)
    paths = []
    for i, img in enumerate(rgb):
        p = Path(f"{stem}_f{i}.ppm")
        write_ppm(p, img)
        paths.append(p)
    return paths

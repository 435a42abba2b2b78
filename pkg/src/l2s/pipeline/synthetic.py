"""Procedural blob stories.

A story fixes one blob identity (colour, radius, texture seed) and renders it
along a bouncing integer-cell trajectory. Channel 0 carries the blob's mass so
the detector stub can find it; channels 1-3 carry colour. Every blob value
lies inside its ground-truth box; outside the box only the low-amplitude
background noise remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..layout import BoundingBox
from ..numerics import RngStream
from ..story import StorySequence
from .records import FrameRecord

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, -0.6, -0.6),
    "green": (-0.6, 1.0, -0.6),
    "blue": (-0.6, -0.6, 1.0),
    "yellow": (1.0, 1.0, -0.6),
    "magenta": (1.0, -0.6, 1.0),
    "cyan": (-0.6, 1.0, 1.0),
}
SIZE_NAMES = {2: "small", 3: "large"}


@dataclass
class SyntheticConfig:
    h: int = 16
    w: int = 16
    frame_counts: tuple[int, ...] = (4,)
    palette: tuple[str, ...] = tuple(PALETTE)
    radii: tuple[int, ...] = (2, 3)
    max_speed: int = 2
    noise_std: float = 0.05
    texture_amp: float = 0.1

    def __post_init__(self):
        self.frame_counts = tuple(int(f) for f in self.frame_counts)
        self.palette = tuple(self.palette)
        self.radii = tuple(int(r) for r in self.radii)
        unknown = [c for c in self.palette if c not in PALETTE]
        if unknown:
            raise ValueError(f"unknown palette colours {unknown}")
        if any(2 * r > min(self.h, self.w) or r < 1 for r in self.radii):
            raise ValueError(f"radii {self.radii} do not fit a {self.h}x{self.w} grid")
        if not self.frame_counts or min(self.frame_counts) < 1:
            raise ValueError("frame_counts must be positive")


@dataclass(frozen=True)
class BlobIdentity:
    color: str
    radius: int
    texture_seed: int

    @property
    def size(self) -> str:
        return SIZE_NAMES.get(self.radius, f"r{self.radius}")


def blob_profile(radius: int, texture_seed: int, amp: float) -> np.ndarray:
    """(2r, 2r) intensity of a textured disc; every edge row/column stays above half max."""
    n = 2 * radius
    u = (np.arange(n) + 0.5) / radius - 1.0
    d2 = u[:, None] ** 2 + u[None, :] ** 2
    base = np.clip(1.2 - 0.6 * d2, 0.0, None)
    tex = np.random.Generator(np.random.PCG64(texture_seed)).uniform(-1.0, 1.0, size=(n, n))
    return base * (1.0 + amp * tex)


def render_frame(identity: BlobIdentity, x: int, y: int, noise: np.ndarray,
                 cfg: SyntheticConfig) -> np.ndarray:
    """Blob with top-left cell (x, y) over the given (h, w, 4) background."""
    out = noise.astype(np.float64).copy()
    n = 2 * identity.radius
    prof = blob_profile(identity.radius, identity.texture_seed, cfg.texture_amp)
    color = np.array((1.0,) + PALETTE[identity.color])
    out[y:y + n, x:x + n, :] += prof[:, :, None] * color
    return out.astype(np.float32)


def cell_box(x: int, y: int, radius: int, h: int, w: int) -> BoundingBox:
    n = 2 * radius
    return BoundingBox(x / w, y / h, (x + n) / w, (y + n) / h)


def trajectory(rng: RngStream, n_frames: int, radius: int, cfg: SyntheticConfig) -> list[tuple[int, int]]:
    """Integer top-left positions under constant velocity with reflection at the borders."""
    n = 2 * radius
    xmax, ymax = cfg.w - n, cfg.h - n
    x = int(rng.integers(0, xmax + 1))
    y = int(rng.integers(0, ymax + 1))
    vx, vy = (int(v) for v in rng.integers(-cfg.max_speed, cfg.max_speed + 1, size=2))
    pts = []
    for _ in range(n_frames):
        pts.append((x, y))
        x, vx = _reflect(x + vx, vx, xmax)
        y, vy = _reflect(y + vy, vy, ymax)
    return pts


def _reflect(p: int, v: int, pmax: int) -> tuple[int, int]:
    if p < 0:
        return -p, -v
    if p > pmax:
        return 2 * pmax - p, -v
    return p, v


def motion_phrase(points: list[tuple[int, int]]) -> str:
    dx = points[-1][0] - points[0][0]
    dy = points[-1][1] - points[0][1]
    if dx == 0 and dy == 0:
        return "staying in place"
    vert = "down" if dy > 0 else "up" if dy < 0 else ""
    horiz = "right" if dx > 0 else "left" if dx < 0 else ""
    return "moving " + "-".join(s for s in (vert, horiz) if s)


def frame_meta(identity: BlobIdentity, box: BoundingBox, motion: str) -> dict:
    return {
        "color": identity.color,
        "size": identity.size,
        "radius": identity.radius,
        "texture_seed": identity.texture_seed,
        "box": box.to_list(),
        "motion": motion,
    }


def draw_identity(rng: RngStream, cfg: SyntheticConfig) -> BlobIdentity:
    return BlobIdentity(
        color=str(rng.choice(list(cfg.palette))),
        radius=int(rng.choice(list(cfg.radii))),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
    )


def gen_synthetic_stories(n: int, cfg: SyntheticConfig | None = None, seed: int = 0,
                          id_prefix: str = "") -> list[StorySequence]:
    """``n`` annotated blob stories; story ``i`` depends only on (seed, i).

    ``id_prefix`` keeps story and video ids of separately generated sets apart.
    """
    from .grouping import annotate_stub

    cfg = cfg or SyntheticConfig()
    root = RngStream(seed, "synthetic")
    stories = []
    for i in range(n):
        rng = root.child(f"story{i}")
        f = int(rng.choice(list(cfg.frame_counts)))
        ident = draw_identity(rng.child("identity"), cfg)
        pts = trajectory(rng.child("trajectory"), f, ident.radius, cfg)
        noise = rng.child("noise").normal(size=(f, cfg.h, cfg.w, 4)) * cfg.noise_std
        frames = np.stack([render_frame(ident, x, y, noise[k], cfg) for k, (x, y) in enumerate(pts)])
        boxes = [cell_box(x, y, ident.radius, cfg.h, cfg.w) for x, y in pts]
        motion = motion_phrase(pts)
        metas = [frame_meta(ident, b, motion) for b in boxes]
        caps = annotate_stub(metas)
        stories.append(StorySequence(
            frames=frames, global_caption=caps["global_caption"],
            subject_captions=caps["subject_captions"], boxes=boxes, ref_frame=0,
            story_id=f"{id_prefix}s{i:05d}", video_id=f"{id_prefix}v{i:05d}",
            meta={"identity": {"color": ident.color, "radius": ident.radius,
                               "texture_seed": ident.texture_seed}, "frames": metas}))
    return stories


@dataclass
class VideoConfig:
    """Long synthetic "videos": consecutive shots, each showing one blob identity."""
    n_videos: int = 4
    frames_per_video: int = 160
    shots_per_video: int = 6
    n_categories: int = 4
    blob: SyntheticConfig = field(default_factory=SyntheticConfig)


def gen_synthetic_videos(cfg: VideoConfig | None = None, seed: int = 0) -> list[FrameRecord]:
    """Frame records sampled at 0.25 fps, with scores and generator metadata."""
    cfg = cfg or VideoConfig()
    bc = cfg.blob
    root = RngStream(seed, "videos")
    records = []
    for v in range(cfg.n_videos):
        rng = root.child(f"video{v}")
        vid = f"vid{v:04d}"
        category = f"cat{v % cfg.n_categories:02d}"
        cuts = np.sort(rng.child("cuts").choice(np.arange(1, cfg.frames_per_video),
                                                 size=cfg.shots_per_video - 1, replace=False))
        bounds = [0, *(int(c) for c in cuts), cfg.frames_per_video]
        scores = rng.child("scores")
        idx = 0
        for s in range(len(bounds) - 1):
            srng = rng.child(f"shot{s}")
            ident = draw_identity(srng.child("identity"), bc)
            n = bounds[s + 1] - bounds[s]
            pts = trajectory(srng.child("trajectory"), n, ident.radius, bc)
            noise = srng.child("noise").normal(size=(n, bc.h, bc.w, 4)) * bc.noise_std
            motion = motion_phrase(pts)
            for k, (x, y) in enumerate(pts):
                box = cell_box(x, y, ident.radius, bc.h, bc.w)
                meta = frame_meta(ident, box, motion)
                meta.update(category=category, shot=s)
                records.append(FrameRecord(
                    video_id=vid, frame_index=idx, timestamp_s=4.0 * idx,
                    latent=render_frame(ident, x, y, noise[k], bc),
                    aesthetic_score=float(scores.uniform(3.0, 7.0)),
                    nsfw=bool(scores.random() < 0.02),
                    meta=meta))
                idx += 1
    return records

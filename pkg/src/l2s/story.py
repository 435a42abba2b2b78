"""The unit of training and evaluation data."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layout import BoundingBox


@dataclass
class StorySequence:
    frames: np.ndarray  # (f, h, w, 4) clean latents
    global_caption: str
    subject_captions: list[str]
    boxes: list[BoundingBox]
    ref_frame: int = 0
    story_id: str = ""
    video_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = self.frames.shape[0]
        if len(self.subject_captions) != f or len(self.boxes) != f:
            raise ValueError(f"story {self.story_id!r}: {f} frames but "
                             f"{len(self.subject_captions)} captions / {len(self.boxes)} boxes")
        if not 0 <= self.ref_frame < f:
            raise ValueError(f"story {self.story_id!r}: ref_frame {self.ref_frame} outside [0, {f})")
        if not self.global_caption.strip() or not all(c.strip() for c in self.subject_captions):
            raise ValueError(f"story {self.story_id!r}: captions must be non-empty")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

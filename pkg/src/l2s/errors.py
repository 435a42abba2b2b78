"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures without
inspecting messages: 3 for validation problems, 4 for numeric failures.
"""

from __future__ import annotations


class L2SError(Exception):
    exit_code = 3


class ValidationError(L2SError):
    exit_code = 3


class NumericError(L2SError):
    exit_code = 4


# numerics
class ShapeMismatch(ValidationError):
    pass


class AllMaskedRow(NumericError):
    pass


class NoTape(NumericError):
    pass


class NonDeterministicFunction(NumericError):
    pass


class MissingGrad(ValidationError):
    pass


# layout
class InvalidBox(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class CaptionTooLong(ValidationError):
    pass


# model
class EmptyCaption(ValidationError):
    pass


class BadRefFrame(ValidationError):
    pass


# diffusion
class BadRange(ValidationError):
    pass


class BadTimestep(ValidationError):
    pass


class BadSpec(ValidationError):
    pass


class MissingStage1Checkpoint(ValidationError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step


# pipeline
class MissingScore(ValidationError):
    pass


class NoSubject(ValidationError):
    pass


class TooFewPoints(ValidationError):
    pass


class MissingMetadata(ValidationError):
    pass


class SplitLeak(ValidationError):
    def __init__(self, video_ids):
        self.video_ids = sorted(video_ids)
        super().__init__("video ids present in both splits: " + ", ".join(self.video_ids))


# eval
class DegenerateInput(ValidationError):
    pass


class NotSquare(ValidationError):
    pass


class TooFewFrames(ValidationError):
    pass


# cli / io
class ConfigError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class IoError(ValidationError):
    pass

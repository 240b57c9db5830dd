"""Exception hierarchy shared by every musemask module."""

from __future__ import annotations


class MuseMaskError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(MuseMaskError, ValueError):
    exit_code = 2


class InvalidSceneError(MuseMaskError, ValueError):
    exit_code = 3


class DegenerateSceneError(InvalidSceneError):
    """A scene with a single layer cannot produce a leave-one-out pair."""


class FormatError(MuseMaskError, ValueError):
    """Malformed PGM/PPM/RLE/MKDF payloads."""

    exit_code = 3


class DecodeError(MuseMaskError, ValueError):
    exit_code = 3


class VocabularyError(MuseMaskError, ValueError):
    exit_code = 3


class ShapeError(MuseMaskError, ValueError):
    exit_code = 3


class RegionError(MuseMaskError, ValueError):
    exit_code = 3


class PolicyError(MuseMaskError, ValueError):
    """Request violates the plug-and-play decoding policy."""

    exit_code = 2


class TrainingError(MuseMaskError, RuntimeError):
    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class MissingArtifactError(MuseMaskError, FileNotFoundError):
    exit_code = 5

"""Exception hierarchy shared across the package."""
from __future__ import annotations


class LesionMTError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(LesionMTError, ValueError):
    pass


class ShapeMismatchError(LesionMTError, ValueError):
    pass


class InvalidRootError(LesionMTError, ValueError):
    pass


class ConfigError(LesionMTError, ValueError):
    pass


class FormatError(LesionMTError, ValueError):
    """Malformed file contents. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class IngestionError(LesionMTError, ValueError):
    pass


class StratificationError(LesionMTError, ValueError):
    pass


class MetricInputError(LesionMTError, ValueError):
    pass


class UndefinedAUCError(LesionMTError, ValueError):
    """AUC requested for a label set with no positive/negative pair."""


class EvaluationError(LesionMTError, ValueError):
    pass


class DivergenceError(LesionMTError, FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None, fold: int | None = None):
        self.epoch = epoch
        self.step = step
        self.fold = fold
        ctx = ", ".join(f"{k}={v}" for k, v in (("fold", fold), ("epoch", epoch), ("step", step)) if v is not None)
        super().__init__(f"{message} [{ctx}]" if ctx else message)


class CheckpointError(LesionMTError, ValueError):
    pass

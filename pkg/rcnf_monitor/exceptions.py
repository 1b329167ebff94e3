"""Exception hierarchy for the RC-NF monitor.

Validation errors mean the caller handed us something unusable (CLI exit 2);
runtime errors mean a computation failed on valid input (CLI exit 3).
"""
from __future__ import annotations


class RCNFError(Exception):
    """Base class for every error raised by this package."""


class RCNFValidationError(RCNFError):
    """Input rejected before any work was done."""


class RCNFRuntimeError(RCNFError):
    """A computation failed on otherwise valid input."""


# ── Validation ───────────────────────────────────────────────────────

class ConfigError(RCNFValidationError):
    pass


class InvalidDimensionsError(RCNFValidationError):
    pass


class UnknownTaskError(RCNFValidationError, KeyError):
    def __init__(self, task_id: str) -> None:
        super().__init__(task_id)
        self.task_id = task_id

    def __str__(self) -> str:
        return f"Unknown task: {self.task_id!r}"


class ShapeMismatchError(RCNFValidationError, ValueError):
    pass


class EmptyProjectionError(RCNFValidationError):
    pass


class EmptyMaskError(RCNFValidationError):
    pass


class EpisodeTooShortError(RCNFValidationError):
    pass


class InsufficientCalibrationDataError(RCNFValidationError):
    pass


class MixedLabelsError(RCNFValidationError):
    pass


class SingleClassError(RCNFValidationError):
    pass


class NoPositivesError(RCNFValidationError):
    pass


class AnomalousTrainingDataError(RCNFValidationError):
    pass


# ── Runtime ──────────────────────────────────────────────────────────

class ActNormAlreadyInitializedError(RCNFRuntimeError):
    pass


class UninitializedActNormError(RCNFRuntimeError):
    pass


class UninitializedWeightsError(RCNFRuntimeError):
    pass


class SingularMixingError(RCNFRuntimeError):
    pass


class TrainingDivergedError(RCNFRuntimeError):
    """NLL went non-finite; carries the partial report."""

    def __init__(self, message: str, report=None) -> None:
        super().__init__(message)
        self.report = report

"""Exception hierarchy for cemcd."""

from pathlib import Path


class CemcdError(Exception):
    """Base class for all errors raised by cemcd."""


class ConfigError(CemcdError, ValueError):
    """Invalid configuration value or combination of values."""


class ShapeError(CemcdError, ValueError):
    """Tensor shapes violate a spatial or channel contract."""


class DatasetLayoutError(CemcdError):
    """Dataset directory does not follow the ``A/ B/ label/ list/`` layout."""


class ImageIOError(CemcdError, OSError):
    """An image file could not be read or decoded."""


class SynthesisError(CemcdError):
    """Synthetic dataset generation could not reach the requested change fraction."""


class CheckpointError(CemcdError):
    """Checkpoint container is malformed or does not match the expected model."""


class EmptyEvaluationError(CemcdError):
    """Metrics were requested for zero evaluated pixels."""


class DivergenceError(CemcdError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, last_good_checkpoint: Path | None = None) -> None:
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint

"""Event-camera video reconstruction with temporal-residual conditional diffusion."""

__version__ = "0.1.0"

from .errors import (
    CheckpointMismatchError,
    EvdiffError,
    EventFormatError,
    GeometryError,
    MissingArtifactError,
    ValidationError,
)

__all__ = [
    "__version__",
    "EvdiffError",
    "EventFormatError",
    "GeometryError",
    "ValidationError",
    "MissingArtifactError",
    "CheckpointMismatchError",
]

"""Exception hierarchy shared across the package."""


class EvdiffError(Exception):
    """Base class for package-specific errors."""


class EventFormatError(EvdiffError):
    """Malformed event text. Carries a 1-based line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GeometryError(EvdiffError):
    """Coordinates or array shapes inconsistent with the sensor geometry."""


class ValidationError(EvdiffError):
    """Invalid parameter or configuration value."""


class MissingArtifactError(EvdiffError):
    """A required upstream artifact (file, checkpoint, directory) is absent."""


class CheckpointMismatchError(EvdiffError):
    """Checkpoint tag or embedded config does not match what the caller expects."""

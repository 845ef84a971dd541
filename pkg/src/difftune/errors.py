"""Shared exception types. Everything raised on purpose derives from DifftuneError."""


class DifftuneError(Exception):
    """Base class for all contract violations raised by this package."""


class ShapeError(DifftuneError, ValueError):
    """Operand shapes violate an operation's contract."""


class GradientError(DifftuneError, ValueError):
    """Backward pass invoked on an unusable loss (non-scalar or detached)."""


class TimestepError(DifftuneError, ValueError):
    """Timestep outside the schedule's 1..T range."""


class ConfigError(DifftuneError, ValueError):
    """Malformed or unknown run-configuration content."""


class PpmError(DifftuneError, ValueError):
    """Unreadable or non-conforming PPM file."""


class CheckpointError(DifftuneError, ValueError):
    """Base class for checkpoint decode failures."""


class BadMagicError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version not supported by this reader."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ends before the declared payload is complete."""

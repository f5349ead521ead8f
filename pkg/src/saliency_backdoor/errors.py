"""Exception types shared across the package."""


class SaliencyBackdoorError(Exception):
    """Base class for all errors raised by this package."""


class ArchitectureError(SaliencyBackdoorError):
    """Unknown architecture, incompatible input shape, or an interpreter
    applied to a model that cannot support it."""


class ShapeMismatchError(SaliencyBackdoorError):
    """An array argument does not have the shape the operation requires."""


class DataError(SaliencyBackdoorError):
    """Empty or malformed dataset input."""


class ConfigError(SaliencyBackdoorError):
    """Invalid experiment configuration."""


class CheckpointError(SaliencyBackdoorError):
    """Base class for checkpoint read/write failures."""


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncated payload, or payload digest mismatch."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version not supported by this code."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture does not match what the caller expects."""

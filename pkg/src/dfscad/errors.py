"""Exception types shared across the package."""


class DfscError(Exception):
    """Base class for all package errors."""


class ShapeError(DfscError, ValueError):
    """Array shapes do not satisfy an operator's contract."""


class CheckpointError(DfscError):
    """A checkpoint file could not be read back."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes, truncated payload or unparseable manifest."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version."""


class CheckpointShapeError(CheckpointError):
    """Stored arrays or config do not match the expected model layout."""


class NumericalError(DfscError, FloatingPointError):
    """A loss or parameter became non-finite during training."""


class DatasetError(DfscError):
    """Base class for dataset layout problems."""


class MissingPathError(DatasetError, FileNotFoundError):
    """A required directory or file is absent or empty."""


class OrphanMaskError(DatasetError):
    """A ground-truth mask directory has no matching test image."""


class ConfigError(DfscError, ValueError):
    """A configuration document or value is malformed."""


class SpecError(ConfigError):
    """A synthetic dataset spec cannot be satisfied."""

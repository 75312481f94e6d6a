"""Exception types shared across the package."""


class FusionNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FusionNetError):
    """Tensor shapes are inconsistent for the requested operation."""


class ConfigurationError(FusionNetError):
    """A model or run configuration violates a build-time contract."""


class ValidationError(FusionNetError):
    """Input values are outside an operation's documented domain."""


class CheckpointError(FusionNetError):
    """A checkpoint file is malformed or does not match the model."""


class TrainingError(FusionNetError):
    """Training aborted (non-finite loss or gradients)."""


class InversionError(FusionNetError):
    """Confusion-matrix reconstruction produced an impossible count."""

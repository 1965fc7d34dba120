"""
Exception hierarchy for the FLI compression toolkit.
The CLI maps these classes onto its exit codes.
"""


class FliqError(Exception):
    """Base class for every toolkit error."""
    pass


class ConfigError(FliqError, ValueError):
    """Invalid configuration value."""
    pass


class ShapeError(FliqError, ValueError):
    """Tensor or sequence dimensions do not agree."""
    pass


class NonFiniteError(FliqError, ArithmeticError):
    """NaN or Inf where a finite value is required."""
    pass


class StaleCacheError(FliqError):
    """Forward cache does not belong to the model passed to backward."""
    pass


class TrainingDivergedError(FliqError, ArithmeticError):
    """Loss became non-finite during training."""
    pass


class QuantizationError(FliqError):
    """Quantized model is missing, uncalibrated or overflow-prone."""
    pass


class DataFormatError(FliqError):
    """Input file or payload is malformed."""
    pass


class BadMagicError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class ManifestError(DataFormatError):
    pass


class IdxFormatError(DataFormatError):
    pass


class IrfError(DataFormatError):
    pass

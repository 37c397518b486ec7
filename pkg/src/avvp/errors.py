"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


class NumericError(FloatingPointError):
    """Raised when a computation produces or receives non-finite values."""


class FormatError(ValueError):
    """Raised when an on-disk file does not match its declared layout."""


class VersionError(FormatError):
    """Raised when a checkpoint carries an unknown format version."""


class ConfigError(ValueError):
    """Raised for invalid configuration values or unknown keys."""

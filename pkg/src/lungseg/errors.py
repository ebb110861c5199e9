"""Exception types shared across the toolkit.

Each class maps onto one CLI exit code (see ``lungseg.cli``).
"""


class LungSegError(Exception):
    """Base class for every error raised deliberately by this package."""

    exit_code = 1


class UsageError(LungSegError, ValueError):
    """Caller passed something that cannot be valid (bad flag, empty split...)."""

    exit_code = 1


class ShapeError(LungSegError, ValueError):
    """Tensor or raster dimensions are incompatible."""

    exit_code = 1


class ConfigError(LungSegError, ValueError):
    """A model/run configuration violates its invariants."""

    exit_code = 1


class FormatError(LungSegError):
    """A file on disk does not have the expected layout (checkpoint, TSV)."""

    exit_code = 2


class DataIOError(LungSegError, OSError):
    """A dataset file or directory could not be read or written."""

    exit_code = 2


class NumericError(LungSegError, FloatingPointError):
    """NaN/Inf showed up where finite values are required."""

    exit_code = 3

"""Exception hierarchy.

Three broad families map onto CLI exit codes: configuration problems (2),
data/format problems (3), numerical failures (4).
"""


class OximapError(Exception):
    """Base class for everything raised on purpose by this package."""


class ConfigError(OximapError):
    """Invalid parameter value, unknown config key, or violated invariant."""

    exit_code = 2


class RangeError(ConfigError):
    """Value outside the supported domain (wavelength, fraction, ...)."""


class DataError(OximapError):
    exit_code = 3


class DataFormatError(DataError):
    """Bad magic, unsupported version, truncation, or checksum mismatch."""


class ShapeError(DataError):
    """Array shape does not match what the pipeline stage expects."""


class StratificationError(DataError):
    """A label bin is too small to honor the requested split fractions."""


class CalibrationError(DataError):
    """Reference frames unusable (non-positive light spectrum, shape clash)."""


class NumericError(OximapError):
    exit_code = 4


class TrainingError(NumericError):
    """Non-finite loss or gradient during optimization."""


class NormalizationError(NumericError):
    """Spectrum area is zero or negative, cannot normalize."""


class AbsorbanceError(NumericError):
    """Reflectance not strictly positive, log-absorbance undefined."""


class FitError(NumericError):
    """Regression preconditions violated (too few points, zero variance, ...)."""

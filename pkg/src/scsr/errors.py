"""Exception hierarchy shared by every module.

Each error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its one-line failure message.
"""


class ScsrError(Exception):
    category = "error"


class BoundsError(ScsrError, ValueError):
    category = "bounds"


class ShapeError(ScsrError, ValueError):
    category = "shape"


class ConfigurationError(ScsrError, ValueError):
    category = "config"


class InsufficientDataError(ScsrError, ValueError):
    category = "insufficient-data"


class DegenerateMaskError(ScsrError, ValueError):
    category = "degenerate-mask"


class SplitError(ScsrError, ValueError):
    category = "split"


class UndefinedMetricError(ScsrError, ValueError):
    category = "undefined-metric"


class NumericError(ScsrError, ArithmeticError):
    category = "numeric"

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class ConvergenceError(ScsrError, RuntimeError):
    category = "convergence"

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class FormatError(ScsrError):
    """Base class for malformed or inconsistent files."""

    category = "format"


class MagicError(FormatError):
    category = "format-magic"


class VersionError(FormatError):
    category = "format-version"


class TruncatedError(FormatError):
    category = "format-truncated"


class LengthMismatchError(FormatError):
    category = "format-length"


class ValidationError(FormatError):
    category = "format-validation"

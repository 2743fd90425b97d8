"""Exception hierarchy shared by all modules."""


class M3Error(Exception):
    """Base class for every error raised by the package."""


class DimensionError(M3Error, ValueError):
    """Shapes of operands do not agree."""


class NumericError(M3Error, ArithmeticError):
    """A non-finite value entered or left a computation."""


class DegenerateVectorError(NumericError):
    """A zero-norm vector was given where a direction is required."""


class PreconditionError(M3Error, ValueError):
    """An operation was called with arguments violating its contract."""


class ConfigError(M3Error, ValueError):
    """Invalid run configuration. ``path`` names the offending field."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class FormatError(M3Error):
    """A binary file has the wrong magic, version or layout."""


class TruncatedError(FormatError):
    """A binary file ends before its header-declared payload."""

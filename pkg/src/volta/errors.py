"""Exception hierarchy shared by every module."""


class VoltaError(Exception):
    """Base class for all errors raised by the package."""


class InvalidArgumentError(VoltaError, ValueError):
    """Malformed input: wrong shape, empty container, out-of-range value."""


class DegenerateInputError(VoltaError, ValueError):
    """Input is well-formed but numerically degenerate (e.g. a near-zero norm)."""


class NumericFailure(VoltaError, ArithmeticError):
    """A computation produced non-finite values."""


class ConfigError(VoltaError, ValueError):
    """An experiment or training configuration is invalid."""

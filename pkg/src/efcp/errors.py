"""Exception types shared across the package."""


class EfcpError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EfcpError, ValueError):
    """Invalid run configuration or operation parameter."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ShapeError(EfcpError, ValueError):
    """Dimension or block-structure mismatch."""


class NumericalBreakdown(EfcpError, ArithmeticError):
    """A quantity that is positive in exact arithmetic came out non-positive."""


class DivergenceError(EfcpError, FloatingPointError):
    """An optimizer step produced non-finite values.

    ``record`` holds the diagnostic step record of the offending step.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record

"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so library code raises the most specific
class that applies.
"""


class OCAError(Exception):
    """Base class for all errors raised by ocacompat."""


class StructuralError(OCAError, ValueError):
    """Shapes, dimensions, labels or enumerants are inconsistent."""


class NumericError(OCAError, ArithmeticError):
    """Non-finite values or degenerate (zero-norm) vectors."""


class ParseError(OCAError, ValueError):
    """A file on disk is malformed."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location


class UnsupportedVersionError(ParseError):
    pass


class UsageError(OCAError, RuntimeError):
    """An operation was invoked in the wrong state (e.g. backward before forward)."""


class ConfigError(OCAError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field

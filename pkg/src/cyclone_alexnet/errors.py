"""Exception types shared across the package.

The CLI maps each family to a distinct exit code, so library code raises the
most specific class available instead of a bare ``ValueError``.
"""


class CycloneError(Exception):
    """Base class for all package errors."""


class ConfigError(CycloneError, ValueError):
    """Invalid configuration or argument combination."""


class DimensionError(CycloneError, ValueError):
    """Tensor shapes do not line up.

    ``axes`` names the offending axes so callers can report them.
    """

    def __init__(self, message, axes=()):
        super().__init__(message)
        self.axes = tuple(axes)


class DataError(CycloneError):
    """Problems with input data: missing files, bad labels, bad images."""

    def __init__(self, message, row_errors=None):
        super().__init__(message)
        self.row_errors = list(row_errors or [])


class CheckpointError(DataError):
    """A checkpoint on disk is unreadable, truncated or inconsistent."""


class NumericError(CycloneError, ArithmeticError):
    """Non-finite values appeared during training or inference."""

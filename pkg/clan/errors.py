"""
Error types raised across the package.

Each error also derives from the closest builtin so callers that only know
about ValueError / ArithmeticError keep working.
"""

from typing import Optional


class ClanError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ClanError, ValueError):
    """Tensor shapes or extents do not fit together."""


class ConfigurationError(ClanError, ValueError):
    """An operation or model was configured with impossible settings."""


class DataError(ClanError, ValueError):
    """Input data is out of its valid range (labels, pixel values)."""


class UsageError(ClanError, ValueError):
    """An API was called the wrong way (non-scalar backward, unknown branch...)."""


class NumericError(ClanError, ArithmeticError):
    """NaN or overflow met during a computation."""


class DivergenceError(NumericError):
    """Training loss became NaN or infinite."""


class ConfigError(ConfigurationError):
    """Invalid run-configuration file, with the offending line when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)

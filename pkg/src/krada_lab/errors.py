"""Exception types shared across the package.

The CLI maps these onto process exit codes, so every raise site should use
the most specific class available.
"""


class KradaError(Exception):
    """Base class for all package errors."""


class ShapeError(KradaError, ValueError):
    """Tensor dimensions do not match an operation's contract."""


class UsageError(KradaError, RuntimeError):
    """An API was called in an invalid state (e.g. a consumed tape)."""


class ConfigError(KradaError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(KradaError, ValueError):
    """Malformed, truncated or out-of-range on-disk data."""


class NumericalError(KradaError, ArithmeticError):
    """A loss or parameter became non-finite."""

"""Exceptions shared across the package.

The CLI maps ConfigError to exit code 2 and NumericalAbort to exit code 3.
"""


class ConfigError(ValueError):
    """A configuration was rejected before any work started."""


class NumericalAbort(RuntimeError):
    """Training hit a NaN loss or an exploding gradient and stopped."""

"""Exception types shared across the package.

``ValidationError`` covers bad user input (arguments, configuration,
malformed files) and maps to CLI exit code 1; anything else that escapes
is treated as a runtime failure (exit code 2).
"""


class ValidationError(ValueError):
    """Invalid argument, configuration, or input file."""


class ConfigurationError(ValidationError):
    """Invalid configuration value (bad step count, out-of-range offset, ...)."""


class ShapeError(ValidationError):
    """Array shapes disagree with what an operation requires."""

"""Exception types shared across the package."""


class MetaSpeakerError(Exception):
    """Base class for all package errors."""


class ConfigError(MetaSpeakerError, ValueError):
    """Inconsistent or invalid configuration."""


class InputError(MetaSpeakerError, ValueError):
    """Input data does not satisfy an operation's preconditions."""


class NumericError(MetaSpeakerError, ArithmeticError):
    """A computation produced a non-finite value."""

"""Exception hierarchy shared across the package."""


class CPCMError(Exception):
    """Base class for all package errors."""


class DataError(CPCMError, ValueError):
    """Input data is malformed or violates a documented precondition."""


class ConfigError(CPCMError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class NumericalError(CPCMError, ArithmeticError):
    """A numerical routine hit a singular or divergent state."""

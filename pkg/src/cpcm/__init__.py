"""Causal driver screening, filtering, PDE control and manifold allocation for portfolios."""

from .errors import CPCMError, ConfigError, DataError, NumericalError

__version__ = "0.1.0"

__all__ = ["CPCMError", "ConfigError", "DataError", "NumericalError", "__version__"]

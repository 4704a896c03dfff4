"""Profile Bayesian optimization with GP and deep GP surrogates."""

from profilebo.errors import (
    ConfigError,
    DegeneracyError,
    InvalidArgument,
    NumericalFailure,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegeneracyError",
    "InvalidArgument",
    "NumericalFailure",
    "__version__",
]

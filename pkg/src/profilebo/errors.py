"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class NumericalFailure(RuntimeError):
    """Raised when a linear-algebra or sampling step breaks down."""


class DegeneracyError(ValueError):
    """Raised when a point set is affinely degenerate for triangulation."""


class ConfigError(ValueError):
    """Raised for unresolvable or inconsistent experiment configuration."""

"""Exception types shared across the package."""


class NumericError(ArithmeticError):
    """Raised when a computation receives or produces non-finite values."""


class ConfigError(ValueError):
    """Raised when an experiment config file fails to parse or validate."""

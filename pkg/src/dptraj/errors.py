class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(ValueError):
    """Unreadable, malformed or mismatched input data."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or non-convergent result."""

"""Exception types shared across the package."""


class UsageError(ValueError):
    """Invalid arguments, shapes or configuration supplied by the caller."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values (e.g. diverging training)."""

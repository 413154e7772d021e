"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class DataError(ValueError):
    """Input data is malformed or violates a schema rule."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite or numerically impossible result."""

"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class FormatError(ValueError):
    """Raised when a file is not in a recognized or valid format."""


class NumericalFailure(ArithmeticError):
    """Raised when a factorization, solve, or iterate stops being usable."""

"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """Bad input values, violated preconditions, or malformed user data."""


class FormatError(ValidationError):
    """A file does not conform to one of the on-disk formats."""


class NumericError(RuntimeError):
    """Non-finite values appeared where a computation requires finite ones."""

"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor extents are incompatible with an operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DataError(ValueError):
    """Input data is missing or insufficient."""


class SchemaError(ValueError):
    """A file parsed but its contents violate the expected schema."""


class ParseError(ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class ParameterError(ValueError):
    """A transformation or attack parameter is outside its valid domain."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


class OracleError(RuntimeError):
    """A classifier oracle failed to answer a query."""

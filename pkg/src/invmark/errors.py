"""Exception types shared across the toolkit."""


class InvmarkError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(InvmarkError, ValueError):
    pass


class ConfigError(InvmarkError, ValueError):
    pass


class DomainError(InvmarkError, ValueError):
    """Input lies outside the value domain of an operation (e.g. non-binary bits)."""


class NumericError(InvmarkError, ArithmeticError):
    """NaN/inf encountered where finite values are required."""


class CheckpointError(InvmarkError):
    """Missing, corrupt, or incompatible checkpoint."""

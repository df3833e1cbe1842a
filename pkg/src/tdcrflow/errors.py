"""Shared exception types."""


class ContractViolation(ValueError):
    """An argument or state violates a documented precondition."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finiteness is guaranteed."""


class FormatError(ValueError):
    """A persisted file does not match its declared binary/text format."""

"""Exception types shared across the package."""


class LatemError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(LatemError):
    """Malformed input file or byte stream (parse-level problems)."""


class ValidationError(LatemError):
    """Structurally valid input that violates a semantic contract."""


class NumericError(LatemError):
    """Non-finite values encountered during numeric computation."""

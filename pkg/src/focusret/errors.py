"""Exception hierarchy shared by every module."""


class FocusRetError(Exception):
    """Base class for all package errors."""


class DimensionError(FocusRetError, ValueError):
    """Shape or axis mismatch between operands."""


class ContractError(FocusRetError, ValueError):
    """A documented precondition of an operation was violated."""


class TapeStateError(FocusRetError, RuntimeError):
    """Tape used after it was consumed, or otherwise out of sequence."""


class ConfigError(FocusRetError, ValueError):
    """Invalid configuration value or combination."""


class VocabularyError(FocusRetError, KeyError):
    """Token id outside the vocabulary."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ParseError(FocusRetError, ValueError):
    """Malformed input file."""


class ValidationError(FocusRetError, ValueError):
    """Input file parsed but violates a schema rule."""


class DegenerateInputError(FocusRetError, ValueError):
    """Input that makes an operation undefined (e.g. a zero-norm vector)."""


class NumericError(FocusRetError, ArithmeticError):
    """NaN or Inf encountered where finite values are required.

    ``checkpoint`` optionally carries the last state known to be good.
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint

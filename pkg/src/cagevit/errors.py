"""Exception types shared across the package."""


class CageError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CageError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(CageError, ValueError):
    """A precondition on argument values was violated."""


class NumericalError(CageError, ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class ParseError(CageError, ValueError):
    """A serialized artifact could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingError(CageError, RuntimeError):
    """Training diverged (non-finite loss)."""


class MeasurementError(CageError, RuntimeError):
    """A benchmark measurement is below the usable timer resolution."""

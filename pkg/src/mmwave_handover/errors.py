"""Exception types shared across the package."""


class HandoverError(Exception):
    """Base class for all package errors."""


class ParameterError(HandoverError, ValueError):
    """A distribution or model parameter is non-finite or out of range."""


class InputError(HandoverError, ValueError):
    """Caller supplied inconsistent data (overlapping events, bad lengths, ...)."""


class ContractViolation(HandoverError, ValueError):
    """A precondition of an operation does not hold (illegal action, shape mismatch)."""


class FormatError(InputError):
    """A file does not match its declared on-disk format."""

    def __init__(self, message: str, offset: int | None = None, row: int | None = None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if row is not None:
            where.append(f"row {row}")
        if where:
            message = f"{message} (at {', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.row = row


class TrainingDivergenceError(HandoverError, FloatingPointError):
    """The loss of a gradient step became non-finite."""

    def __init__(self, message: str, batch_index: int):
        super().__init__(f"{message} (batch index {batch_index})")
        self.batch_index = batch_index


class CalibrationError(HandoverError, RuntimeError):
    """Bisection could not reach the requested target."""

    def __init__(self, message: str, bracket: tuple[float, float], fractions: tuple[float, float]):
        super().__init__(
            f"{message}; bracket rates={bracket}, fractions={fractions}"
        )
        self.bracket = bracket
        self.fractions = fractions


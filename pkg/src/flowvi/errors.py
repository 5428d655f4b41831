"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class FlowVIError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowVIError, ValueError):
    pass


class NumericError(FlowVIError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ContractError(FlowVIError, ValueError):
    """A precondition of an operation was violated."""


class CapabilityError(FlowVIError, NotImplementedError):
    """The requested operation is not available for this object."""


class ConfigError(FlowVIError, ValueError):
    pass


class DataError(FlowVIError, ValueError):
    """Malformed corpus input; carries the offending line when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class EmptyInputError(ContractError):
    """An input that must carry at least one token carried none."""


class TrainingAborted(NumericError):
    """Training hit a non-finite loss or gradient; ``step`` and ``phase`` say where."""

    def __init__(self, message: str, step: int | None = None, phase: str | None = None,
                 param: str | None = None):
        self.step = step
        self.phase = phase
        self.param = param
        super().__init__(message)

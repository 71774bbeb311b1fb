"""Exception hierarchy shared by every module."""


class CollapseLabError(Exception):
    """Base class for all errors raised by collapse_lab."""


class ShapeError(CollapseLabError, ValueError):
    pass


class ContractError(CollapseLabError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(CollapseLabError, ArithmeticError):
    pass


class DegenerateInputError(CollapseLabError, ValueError):
    pass


class InsufficientDataError(CollapseLabError, ValueError):
    pass


class MetricError(CollapseLabError, ValueError):
    pass


class ConfigError(CollapseLabError, ValueError):
    pass


class DataError(CollapseLabError, ValueError):
    pass


class StateError(CollapseLabError, RuntimeError):
    pass


class TrainingAborted(CollapseLabError, RuntimeError):
    """Training hit a non-finite loss; ``diagnostics`` holds step and slot norms."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

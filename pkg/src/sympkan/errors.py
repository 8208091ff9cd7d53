"""Exception hierarchy shared by every sympkan module."""


class SympkanError(Exception):
    """Base class for all library errors."""


class UsageError(SympkanError):
    """An API was called in the wrong order or with an empty input."""


class NumericalError(SympkanError):
    """A computation produced a non-finite value."""


class ShapeError(SympkanError, ValueError):
    """Input dimensions do not match what a model or system expects."""


class DegreeError(SympkanError, ValueError):
    """A spline operation needs a higher degree than the grid has."""


class ModelKindError(SympkanError, TypeError):
    """An operation was applied to a model family that does not support it."""


class FormatError(SympkanError):
    """A serialized model or dataset could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SingularityError(SympkanError):
    """Two bodies of an n-body system coincide."""


class IntegrationError(SympkanError):
    """An ODE integration failed; ``last_time`` is the last good time."""

    def __init__(self, message, last_time=None):
        if last_time is not None:
            message = f"{message} (last good time t={last_time:.6g})"
        super().__init__(message)
        self.last_time = last_time


class DivergenceError(SympkanError):
    """Every rollout of a learned field diverged.

    ``partial`` carries the drift statistics computed with the padding rule,
    for callers that still want to report them.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial

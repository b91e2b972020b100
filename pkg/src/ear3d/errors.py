"""Exception hierarchy shared by every module."""


class EarError(Exception):
    """Base class for all package errors."""


class ShapeError(EarError, ValueError):
    pass


class NumericError(EarError, ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs."""


class GraphError(EarError, RuntimeError):
    pass


class ConfigError(EarError, ValueError):
    pass


class DataError(EarError):
    """Malformed or inaccessible data; carries the offending record name if known."""

    def __init__(self, message, record=None):
        super().__init__(message if record is None else f"{record}: {message}")
        self.record = record


class FormatError(DataError):
    def __init__(self, message, offset=None, record=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, record)
        self.offset = offset


class DimensionError(DataError):
    pass


class LeakageError(DataError):
    """A held-out subject's record was requested during training."""


class EmptyMaskError(EarError, ValueError):
    pass


class EmptyCurveError(EarError, ValueError):
    pass

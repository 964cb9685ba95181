"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``NumericalError`` subclasses with 3.
"""


class TrafficDLError(Exception):
    """Base class for package errors."""


class ParameterError(TrafficDLError, ValueError):
    """An argument is outside its documented domain."""


class DataError(TrafficDLError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message, row=None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ConflictError(DataError):
    """Duplicate (sensor, timestamp) record."""


class GridError(DataError):
    """Timestamps do not lie on a regular grid."""


class IncompleteDataError(DataError):
    def __init__(self, sensor, time):
        super().__init__(f"missing speed for sensor {sensor!r} at {time}")
        self.sensor = sensor
        self.time = time


class WindowError(DataError):
    """Lag window plus horizon does not fit in a day."""


class EmptyResultError(DataError):
    """An operation removed every row, day or candidate."""


class DimensionError(DataError, ValueError):
    """Array shapes do not line up."""


class NumericalError(TrafficDLError, ArithmeticError):
    """NaN/Inf encountered or a degenerate statistic."""


class ConvergenceError(NumericalError):
    """Iterative solver hit its iteration cap.

    ``info`` carries the final residuals or gap so callers can decide
    whether the iterate is still usable.
    """

    def __init__(self, message, **info):
        super().__init__(message)
        self.info = info


class TrainingError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class DegenerateError(NumericalError):
    """A statistic is undefined for the input (constant series, rank deficiency)."""

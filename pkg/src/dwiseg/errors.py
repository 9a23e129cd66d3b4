"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class DwisegError(Exception):
    exit_code = 1


class UsageError(DwisegError):
    exit_code = 2


class DataError(DwisegError):
    """Bad or inconsistent input data (exit 3)."""

    exit_code = 3


class FormatError(DataError):
    pass


class UnsupportedError(DataError):
    pass


class ValidationError(DataError):
    pass


class GeometryError(DataError):
    pass


class ShapeError(DataError):
    pass


class SpecError(DataError):
    pass


class SelectionError(DataError):
    pass


class ContextError(DataError):
    pass


class StatsError(DataError):
    pass


class NumericError(DwisegError):
    exit_code = 4


class FitDesignError(NumericError):
    pass


class TrainingError(NumericError):
    pass

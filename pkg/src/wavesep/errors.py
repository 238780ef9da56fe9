"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: data problems exit with 2, numeric
failures with 3.
"""


class WavesepError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class FormatError(WavesepError):
    """Malformed or unrecognised file content."""


class UnsupportedError(WavesepError):
    """Well-formed input that this package does not handle (e.g. >2 channels)."""


class DatasetError(WavesepError):
    """Missing or inconsistent dataset layout."""


class ConsistencyError(DatasetError):
    """Stored mixture does not match the sum of its stems."""

    def __init__(self, message: str, max_deviation: float):
        super().__init__(message)
        self.max_deviation = max_deviation


class ShapeError(WavesepError, ValueError):
    """Array extents do not satisfy an operation's contract."""


class ContractError(WavesepError, ValueError):
    """A precondition of an operation was violated."""


class UndefinedMetricError(WavesepError, ValueError):
    """A metric is undefined for the given input (zero mixture, zero reference)."""


class NumericError(WavesepError, ArithmeticError):
    """Non-finite values appeared during a computation."""

    exit_code = 3

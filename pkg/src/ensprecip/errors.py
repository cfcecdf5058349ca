"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 2, ``ConvergenceError``
subclasses to exit code 3.
"""


class DataError(Exception):
    """Input data violates a contract."""


class ConvergenceError(Exception):
    """A numerical fit failed in a way that cannot be recovered."""


class ConvergenceWarning(UserWarning):
    pass


class MissingLeadError(DataError):
    pass


class InconsistentAccumulationError(DataError):
    pass


class OutOfDomainError(DataError):
    pass


class GapError(DataError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = list(missing)


class EmptyBoxError(DataError):
    pass


class InsufficientHistoryError(DataError):
    pass


class InfiniteMeanError(ValueError):
    pass


class DegenerateTrainingError(DataError):
    pass


class ComponentDomainError(ValueError):
    pass


class GroupMismatchError(DataError):
    pass


class RmmInputError(DataError):
    pass


class EmptyInputError(DataError):
    pass


class AlignmentError(DataError):
    pass

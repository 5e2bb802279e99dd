"""Exception hierarchy shared across the package.

Every error derives from :class:`SparseVoteError` so the CLI can map them to
exit codes in one place.
"""


class SparseVoteError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SparseVoteError, ValueError):
    pass


class ShapeError(SparseVoteError, ValueError):
    pass


class InsufficientPoints(SparseVoteError):
    pass


class DegenerateInput(SparseVoteError):
    pass


class RequiresOrganizedCloud(SparseVoteError):
    pass


class EmptyResult(SparseVoteError):
    pass


class UndefinedMetric(SparseVoteError):
    pass


class EmptyBank(SparseVoteError):
    pass


class StateError(SparseVoteError):
    pass


class LoadError(SparseVoteError):
    """Malformed or missing data file."""


class ParseError(LoadError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ConfigError(SparseVoteError):
    pass


class TrainingDiverged(SparseVoteError):
    pass

"""Exceptions raised by `tnkf`.

Every exception also derives from the builtin that best describes it, so
callers that only care about, say, `ValueError` keep working.
"""


class TNKFError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(TNKFError, ValueError):
    pass


class ResourceLimitError(TNKFError, MemoryError):
    """A dense operation would exceed its configured size cap."""


class NumericalFailure(TNKFError, ArithmeticError):
    pass


class CovarianceCollapse(NumericalFailure):
    """The innovation variance `s_k` was not positive."""

    def __init__(self, iteration, s):
        super().__init__(f"Innovation variance s = {s!r} is not positive at iteration {iteration}; tighten eps_P.")
        self.iteration = iteration
        self.s = s


class DataError(TNKFError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ConfigError(TNKFError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ModelFileError(DataError):
    pass


class UnsupportedVersion(ModelFileError):
    pass


class StaleTrainingData(ModelFileError):
    pass

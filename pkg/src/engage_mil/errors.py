"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.  Plain ValueError (precondition
violations on in-process calls) is treated like ConfigError.
"""


class EngageMilError(Exception):
    exit_code = 1


class ConfigError(EngageMilError):
    exit_code = 2


class DataError(EngageMilError):
    exit_code = 3


class NumericError(EngageMilError):
    exit_code = 4


class ParseError(DataError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class TooShortVideoError(DataError):
    """Fewer sampled frames than one window length."""


class EmptyVideoError(DataError):
    """A video contributed no segments at all."""


class DegenerateWindowError(DataError):
    """Window too small for any interior texture pixel."""


class CannotSplitError(DataError):
    """Subject-independent split impossible (single subject)."""


class NoReliableRatersError(DataError):
    """Every rater fell below the reliability threshold."""


class DegenerateMarginalsError(DataError):
    """Expected disagreement is zero but observed disagreement is not."""


class UndefinedCorrelationError(DataError):
    """Pearson correlation requested for a constant input."""


class IncompatibleArtifactsError(DataError):
    """Model and dataset disagree on feature kind, dimension or bag size."""


class InvalidSplitError(DataError):
    """Train and evaluation data share at least one subject."""


class TrainingDivergedError(NumericError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration cap before its tolerance."""

"""Exception hierarchy shared by every unitrans module."""


class UnitransError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(UnitransError, ValueError):
    """Malformed file or record."""


class UnsupportedFormatError(FormatError):
    """Well-formed input in a format this package does not handle."""


class ParameterError(UnitransError, ValueError):
    """An argument is outside its documented domain."""


class EmptyInputError(UnitransError, ValueError):
    """Input too short to produce any output."""


class StatsError(UnitransError, ValueError):
    """Corpus statistics cannot be computed (e.g. no voiced frames)."""


class ClusteringError(UnitransError, ValueError):
    pass


class ShapeError(UnitransError, ValueError):
    pass


class MetricError(UnitransError, ValueError):
    pass


class InfeasibleAlignmentError(UnitransError, ValueError):
    """No CTC alignment of the target fits in the available frames.

    The loss for such a pair is +inf; callers that prefer the value can
    catch this and read ``loss``.
    """

    loss = float("inf")


class TrainingError(UnitransError, RuntimeError):
    """Training diverged. ``diagnostics`` holds the state at failure."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class LengthError(UnitransError, ValueError):
    pass


class VocabError(UnitransError, ValueError):
    pass

"""Exception types shared across the package."""


class QstackError(Exception):
    """Base class for all package errors."""


class InvalidHorizon(QstackError):
    """Forecast horizon must be a positive integer."""


class SplitTooShort(QstackError):
    """Panel history too short to carve three trailing backtest windows."""


class ParseError(QstackError):
    """Malformed input file; carries a 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RaggedSeries(QstackError):
    """Series in a panel have differing lengths."""


class MissingCell(QstackError):
    """A forecast cube is missing a (learner, window, item, step, tau) entry."""


class DimensionMismatch(QstackError):
    """Array shapes or coordinate values disagree with the expected layout."""


class ZeroDenominator(QstackError):
    """All actuals are zero, so the scaled quantile loss is undefined."""


class NonFiniteObjective(QstackError):
    """The optimization objective became NaN or infinite."""

    def __init__(self, iteration):
        super().__init__(f"objective became non-finite at iteration {iteration}")
        self.iteration = iteration


class TooManyLearners(QstackError):
    """Exhaustive subset enumeration is capped at 20 learners."""


class MissingWindow(QstackError):
    """A learner lacks a forecast cube for one of the three backtest windows."""


class InvalidP(QstackError):
    """Moment parameter p must lie in [1, 2]."""

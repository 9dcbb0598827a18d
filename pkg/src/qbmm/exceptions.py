"""Exception hierarchy for qbmm."""


class QBMMError(Exception):
    """Base class for all package errors."""


class ParseError(QBMMError):
    """Malformed input row; carries the offending line number."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class EmptyRegionError(QBMMError):
    """No observations survived ingestion filters."""


class RankError(QBMMError):
    """Requested basis rank cannot be supported by the available positions."""


class RangeError(QBMMError):
    """Evaluation point outside the basis range."""


class NumericError(QBMMError):
    """Non-finite values or an indefinite system encountered."""


class ConvergenceError(QBMMError):
    """An iterative solver hit its iteration cap.

    ``last`` holds the last iterate and ``trace`` any diagnostics collected.
    """

    def __init__(self, message, last=None, trace=None):
        super().__init__(message)
        self.last = last
        self.trace = trace if trace is not None else []


class DegenerateError(QBMMError):
    """Degenerate dispersion or degrees of freedom."""


class IdentifiabilityError(QBMMError):
    """Error rates with p0 == p1 carry no information about the true counts."""


class FeasibilityError(QBMMError):
    """Observed-scale mean outside the band allowed by the error rates."""


class CalibrationError(QBMMError):
    """Too many bootstrap refits failed."""


class DomainError(QBMMError, ValueError):
    """Argument outside the mathematical domain of a function."""

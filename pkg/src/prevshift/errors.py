"""Exception and warning types shared across the package."""


class PrevShiftError(ValueError):
    """Base class for all data/contract errors raised by prevshift."""


class ZeroPrevalenceError(PrevShiftError):
    pass


class InsufficientSamplesError(PrevShiftError):
    pass


class InvalidSpecError(PrevShiftError):
    pass


class DimensionMismatchError(PrevShiftError):
    pass


class RuleArityMismatchError(PrevShiftError):
    pass


class DegenerateDataError(PrevShiftError):
    pass


class MissingClassRatesError(PrevShiftError):
    pass


class SchemaError(PrevShiftError):
    pass


class ParseError(PrevShiftError):
    """Malformed score file. ``line`` is the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonConvergenceWarning(UserWarning):
    """An iterative fit hit its iteration cap; the best iterate was returned."""

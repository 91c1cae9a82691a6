"""Exception hierarchy shared by the library and the CLI."""


class SourceTraceError(Exception):
    """Base class for all errors raised by sourcetrace."""


class InputError(SourceTraceError, ValueError):
    """Bad user input: files, shapes, or out-of-domain values."""


class ParseError(InputError):
    def __init__(self, message, row=None, col=None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(message + loc)
        self.row = row
        self.col = col


class ShapeError(InputError):
    pass


class DomainError(InputError):
    pass


class NumericalError(SourceTraceError, ArithmeticError):
    """Raised when a numerical routine fails (divergence, non-finite loss, factorization)."""


class UndefinedMetricError(SourceTraceError, ValueError):
    """A metric is undefined for the given input (e.g. AP with no positives)."""

"""Exceptions raised by the ES-Cells toolkit."""


class EscellsError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(EscellsError, ValueError):
    """Input data or parameters violate an operation's preconditions."""


class InsufficientDataError(InvalidInputError):
    """Too few observed values to fit or evaluate."""


class DimensionMismatchError(InvalidInputError):
    """A vector or matrix does not have the expected shape."""


class MissingObservationsError(InvalidInputError):
    """An operation that needs a fully observed series received gaps."""


class EmptyPoolError(InvalidInputError):
    """A noise pool or ensemble has no entries to sample from."""


class CsvFormatError(InvalidInputError):
    """A CSV file does not follow the expected layout."""

    def __init__(self, message: str, line_numbers=None):
        super().__init__(message)
        self.line_numbers = list(line_numbers or [])

"""Exception hierarchy shared by every stage of the pipeline."""


class ForecastError(Exception):
    """Base class for all package errors."""


class ConfigError(ForecastError):
    pass


class DataError(ForecastError):
    pass


class EmptyInputError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InsufficientDataError(DataError):
    pass


class DomainError(ForecastError, ValueError):
    """Parameters or inputs outside the admissible domain."""


class NumericalError(ForecastError, ArithmeticError):
    """A numerical routine failed to reach its tolerance."""

    def __init__(self, message: str, where=None):
        self.where = where
        super().__init__(message)


class StudyAbort(ForecastError):
    pass


class TemporalLeakError(ForecastError):
    """A forecast for one date touched data stamped after it."""

"""Exception types shared across the package."""


class PsrError(Exception):
    """Base class for all package errors."""


class ShapeError(PsrError, ValueError):
    pass


class NumericError(PsrError, ArithmeticError):
    pass


class StateError(PsrError, RuntimeError):
    pass


class DataError(PsrError, ValueError):
    pass


class FormatError(PsrError, ValueError):
    pass


class TrainError(PsrError, RuntimeError):
    """Raised when a training loop diverges; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(PsrError, ValueError):
    pass

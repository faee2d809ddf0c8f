"""Exception types shared across the package."""


class OshedaError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(OshedaError, ValueError):
    pass


class InvalidInputError(OshedaError, ValueError):
    pass


class InvalidBatchError(InvalidInputError):
    pass


class ShapeError(InvalidInputError):
    pass


class ParseError(InvalidInputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StateError(OshedaError, RuntimeError):
    pass


class NumericError(OshedaError, ArithmeticError):
    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class UnsupportedInputError(InvalidInputError):
    pass

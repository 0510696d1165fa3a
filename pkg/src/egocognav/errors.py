"""Exception types shared across the package."""
from sklearn.exceptions import NotFittedError



class EgoCogNavError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(EgoCogNavError, ValueError):
    pass


class NonFinite(EgoCogNavError, FloatingPointError):
    pass


class NotScalar(EgoCogNavError, ValueError):
    pass


class DegenerateInput(EgoCogNavError, ValueError):
    pass


class NotARotation(EgoCogNavError, ValueError):
    pass


class ParseError(EgoCogNavError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingColumn(ParseError):
    pass


class BadWindow(EgoCogNavError, ValueError):
    pass


class EmptyStream(EgoCogNavError, ValueError):
    pass


class TooShort(EgoCogNavError, ValueError):
    pass


class BadConfig(EgoCogNavError, ValueError):
    pass


class BadMagic(EgoCogNavError, ValueError):
    pass


class LengthMismatch(EgoCogNavError, ValueError):
    pass


class OutOfRange(EgoCogNavError, ValueError):
    pass


class UnfitModel(EgoCogNavError, NotFittedError):
    """Raised when predict is called before fit."""


class TooFew(EgoCogNavError, ValueError):
    pass


class EmptyGroup(EgoCogNavError, ValueError):
    pass


class ZeroVariance(EgoCogNavError, ValueError):
    pass

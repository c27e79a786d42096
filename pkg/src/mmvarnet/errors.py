"""Exception hierarchy shared across the package."""


class MMVarNetError(Exception):
    """Base class for all package errors."""


class StructuralError(MMVarNetError, ValueError):
    """Shapes or grids do not line up."""


class UnsupportedShapeError(StructuralError):
    pass


class ConfigError(MMVarNetError, ValueError):
    pass


class DataError(MMVarNetError):
    """Missing, corrupt or inconsistent data artifacts."""


class FormatError(DataError):
    pass


class BadMagicError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class NumericalError(MMVarNetError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class UndefinedScoreError(NumericalError):
    pass

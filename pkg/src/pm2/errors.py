"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the requested operation."""


class ValidationError(ValueError):
    """An input violates a documented precondition."""


class ConfigError(ValueError):
    """A configuration value is missing or outside its allowed range."""


class InsufficientDataError(ValueError):
    """Too few samples or tokens to perform the operation."""


class DegenerateCovarianceError(ValueError):
    """Covariance trace at or below the configured epsilon."""


class DivergenceError(ArithmeticError):
    """An iterate became non-finite."""


class NanGuardError(ArithmeticError):
    """A gradient became non-finite during training."""

    def __init__(self, param: str):
        super().__init__(f"non-finite gradient for parameter {param!r}")
        self.param = param


class Pm2fError(ValueError):
    """Base class for feature-file parse errors; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(Pm2fError):
    pass


class UnsupportedVersionError(Pm2fError):
    pass


class TruncatedFileError(Pm2fError):
    pass


class NonFiniteDataError(Pm2fError):
    pass

# src/utils/errors.py
class AppError(Exception):
    """Base error class for application exceptions."""
    def __init__(self, message: str, exit_code: int = 1):
        super().__init__(message)
        self.exit_code = exit_code


class ConfigError(AppError):
    """Invalid or unsatisfiable configuration."""
    def __init__(self, message: str):
        super().__init__(message, exit_code=2)


class NumericalError(AppError):
    """NaN losses, singular or non-PSD matrices."""
    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class DomainError(AppError, ValueError):
    """Input outside the domain of a geometric transform."""
    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class EstimationError(AppError):
    """Not enough samples to estimate a sensor model."""
    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class ShapeError(AppError, ValueError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=3)


class UsageError(AppError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=1)


class VerificationError(AppError):
    def __init__(self, message: str):
        super().__init__(message, exit_code=1)

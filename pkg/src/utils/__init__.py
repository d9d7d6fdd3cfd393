from .errors import AppError, ConfigError, NumericalError
from .logging import logger

__all__ = ['AppError', 'ConfigError', 'NumericalError', 'logger']

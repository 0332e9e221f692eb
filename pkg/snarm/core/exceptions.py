"""
Exception types raised across the anomaly-detection pipeline
"""

from typing import Optional


class SnarmError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class ConfigError(SnarmError, ValueError):
    """Invalid configuration or out-of-range parameter"""

    exit_code = 2


class DataError(SnarmError, ValueError):
    """Malformed dataset, image, feature grid or metric input"""

    exit_code = 3


class NumericError(SnarmError, ArithmeticError):
    """Non-finite values produced during training or inference"""

    exit_code = 4


class BackendError(SnarmError, RuntimeError):
    """Failure inside an encoder backend"""

    exit_code = 3

    def __init__(self, backend: str, message: str, cause: Optional[BaseException] = None):
        self.backend = backend
        self.cause = cause
        super().__init__(f"encoder backend '{backend}' failed: {message}")

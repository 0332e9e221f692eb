"""Core functionality modules"""

from .config import get_settings, load_config
from .exceptions import BackendError, ConfigError, DataError, NumericError, SnarmError

# Modules that depend on snarm.models (trainer, inference, pipeline) are
# imported directly to keep package import acyclic

__all__ = [
    "get_settings",
    "load_config",
    "SnarmError",
    "ConfigError",
    "DataError",
    "NumericError",
    "BackendError",
]

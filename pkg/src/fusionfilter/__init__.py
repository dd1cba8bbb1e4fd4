"""Fusion-aware near-sensor data filtering: training, evaluation and energy accounting."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, FusionFilterError, ShapeError, UsageError  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = [
    "BACKEND",
    "ConfigError",
    "DataError",
    "FusionFilterError",
    "ShapeError",
    "UsageError",
    "__version__",
]

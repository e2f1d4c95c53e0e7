"""Hyperbolic selective state-space model for next point-of-interest recommendation."""

from .errors import (ConfigError, DataError, DimensionError, GTRError, ManifoldError, NumericError,
                     OrderingError, StorageError, TrainingError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DimensionError", "GTRError", "ManifoldError", "NumericError",
           "OrderingError", "StorageError", "TrainingError", "__version__"]

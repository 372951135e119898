"""Memory-light continual test-time adaptation on a numpy autodiff engine."""

from . import adapt, memledger, netzoo, stream, tensorcore
from .errors import (
    ConfigError,
    ConfigurationError,
    ConstructionError,
    DataError,
    DimensionError,
    EcoError,
    FormatError,
    LabelError,
    LifecycleError,
    NumericError,
    SpecError,
    StatisticsError,
)

__version__ = "0.1.0"

__all__ = [
    "adapt", "memledger", "netzoo", "stream", "tensorcore",
    "ConfigError", "ConfigurationError", "ConstructionError", "DataError", "DimensionError", "EcoError",
    "FormatError", "LabelError", "LifecycleError", "NumericError", "SpecError", "StatisticsError",
]

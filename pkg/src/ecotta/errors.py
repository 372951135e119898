"""Exception hierarchy shared by every ecotta module."""


class EcoError(Exception):
    """Base class for all package errors."""


class DimensionError(EcoError, ValueError):
    """Operand shapes do not conform."""


class ConfigurationError(EcoError, ValueError):
    """An option or hyperparameter is outside its supported range."""


class StatisticsError(EcoError, ValueError):
    """Batch statistics cannot be computed (fewer than two values per channel)."""


class NumericError(EcoError, FloatingPointError):
    """Non-finite values reached an operation that requires finite input."""


class LabelError(EcoError, IndexError):
    """A class label is outside ``[0, C)``."""


class LifecycleError(EcoError, RuntimeError):
    """A graph was used after its saved state had been released."""


class ConstructionError(EcoError, ValueError):
    """A network or meta group could not be assembled from its parts."""


class DataError(EcoError, ValueError):
    """A dataset is empty or otherwise unusable."""


class FormatError(EcoError, ValueError):
    """A binary container is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SpecError(EcoError, ValueError):
    """An architecture description cannot be resolved to concrete shapes."""


class ConfigError(ConfigurationError):
    """A configuration file or override could not be parsed.

    ``line`` is the 1-based line number, when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line

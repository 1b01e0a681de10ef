"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(SimError):
    """Operands have incompatible dimensions."""


class ParameterError(SimError):
    """A hyperparameter or argument is outside its valid range."""


class DegenerateInputError(SimError):
    """Input is structurally valid but numerically degenerate (zero vectors, NaN)."""


class DataFormatError(SimError):
    """A file or byte stream does not match the expected format."""


class PartitionError(SimError):
    """Shard allocation could not satisfy the size constraints."""


class ConfigError(SimError):
    """Experiment configuration failed validation."""

"""Exception types shared across the package."""


class LesionForgeError(Exception):
    """Base class for all package errors."""


class ShapeError(LesionForgeError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(LesionForgeError):
    """A numeric argument is outside its valid range."""


class ContractError(LesionForgeError):
    """An API contract was violated (wrong rank, mismatched mask, ...)."""


class ConfigError(LesionForgeError):
    """A model or run configuration is invalid."""


class DataError(LesionForgeError):
    """A dataset record or metadata file is malformed."""


class CheckpointError(LesionForgeError):
    """A checkpoint file is corrupt or does not match the target model."""


class TrainingError(LesionForgeError):
    """A training step produced a non-finite loss or gradient."""


class EvaluationError(LesionForgeError):
    """A function under test produced a non-finite value."""

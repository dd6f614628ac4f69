"""Minimal-dependency pipeline for imbalanced image classification.

Three stages built on one small autograd engine: class-conditioned diffusion
to synthesize minority-class images, masked-autoencoder pretraining on the
rebalanced corpus, and teacher-to-student distillation into a compact
classifier.
"""

from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    EvaluationError,
    LesionForgeError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from .rng import RngState
from .tensor import Tensor, gradcheck, no_grad

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "DataError",
    "EvaluationError",
    "LesionForgeError",
    "ParameterError",
    "RngState",
    "ShapeError",
    "Tensor",
    "TrainingError",
    "gradcheck",
    "no_grad",
    "__version__",
]

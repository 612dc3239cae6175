"""HRR global-convolution byte-sequence classifier with analytic gradients."""

from .errors import (CheckpointError, ConfigError, DataError, HGConvError, NearSingularError,
                     ShapeError, StateError)
from .model import PAD_ID, ModelConfig, ModelParams, backward, forward, init_params

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "DataError", "HGConvError", "NearSingularError",
    "ShapeError", "StateError", "PAD_ID", "ModelConfig", "ModelParams", "backward",
    "forward", "init_params", "__version__",
]

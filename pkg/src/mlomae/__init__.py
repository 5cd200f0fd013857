"""Masked-autoencoder pretraining with a learned, validation-guided masking policy."""

from .engine import MloConfig, TrainState, init_train_state, mlo_train, probe_head
from .errors import ConfigError, DataFormatError, NumericAbort
from .nn import ModelDims

__version__ = "0.1.0"

__all__ = [
    "MloConfig", "ModelDims", "TrainState", "init_train_state", "mlo_train",
    "probe_head", "ConfigError", "DataFormatError", "NumericAbort", "__version__",
]

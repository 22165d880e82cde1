"""Attention-based convolutional-LSTM script identification."""

__version__ = "0.1.0"

from .model import ModelConfig, init_params  # noqa: F401
from .trainer import TrainConfig, evaluate, gradient_check, train  # noqa: F401

"""Selective-scan state-space segmentation network with reverse-attention decoding."""

from .config import ModelConfig, TrainConfig, desk_model_config, desk_train_config
from .model import RMAMamba, build_model, count_parameters
from .tensor import Tape, Tensor, no_grad

__all__ = [
    "ModelConfig", "TrainConfig", "desk_model_config", "desk_train_config",
    "RMAMamba", "build_model", "count_parameters",
    "Tape", "Tensor", "no_grad",
]

"""
Small convolutional image-to-image regressor used by every learned stage.
"""

from ct_tools.regressor.layers import conv2d_backward, conv2d_forward
from ct_tools.regressor.model import (
    RegressorModel,
    RegressorSpec,
    init_model,
    load_model,
    match_width,
    predict,
    predict_stack,
    save_model,
)
from ct_tools.regressor.train import TrainConfig, augment, train

__all__ = [
    "RegressorModel",
    "RegressorSpec",
    "TrainConfig",
    "augment",
    "conv2d_backward",
    "conv2d_forward",
    "init_model",
    "load_model",
    "match_width",
    "predict",
    "predict_stack",
    "save_model",
    "train",
]

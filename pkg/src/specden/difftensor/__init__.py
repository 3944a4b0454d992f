"""Minimal reverse-mode differentiable tensors with the layer set of the U-Net models."""

from .gradcheck import check_gradients, numerical_gradient, relative_error
from .ops import (
    LOG_VAR_RANGE,
    ConvSpec,
    LatentStats,
    RunningStats,
    batchnorm2d,
    clamp,
    concat_channels,
    conv2d,
    conv2d_transposed,
    depthwise_conv2d,
    depthwise_separable_conv,
    kl_standard_normal,
    maxpool2,
    mse,
    prelu,
    reparameterize,
)
from .tensor import Tensor, as_tensor

__all__ = [
    "LOG_VAR_RANGE",
    "ConvSpec",
    "LatentStats",
    "RunningStats",
    "Tensor",
    "as_tensor",
    "batchnorm2d",
    "check_gradients",
    "clamp",
    "concat_channels",
    "conv2d",
    "conv2d_transposed",
    "depthwise_conv2d",
    "depthwise_separable_conv",
    "kl_standard_normal",
    "maxpool2",
    "mse",
    "numerical_gradient",
    "prelu",
    "relative_error",
    "reparameterize",
]

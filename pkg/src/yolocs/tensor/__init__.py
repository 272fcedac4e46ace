from yolocs.tensor.ops import (
    add,
    add_backward,
    batchnorm_backward,
    batchnorm_forward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    maxpool2d,
    maxpool2d_backward,
    sigmoid,
    silu,
    silu_backward,
    split_channels,
    upsample_nearest_2x,
    upsample_nearest_2x_backward,
)
from yolocs.tensor.types import BatchNormParams, ConvParams, ConvSpec, check_tensor4

__all__ = [
    "BatchNormParams", "ConvParams", "ConvSpec", "check_tensor4",
    "add", "add_backward", "batchnorm_backward", "batchnorm_forward", "concat_channels",
    "conv2d_backward", "conv2d_forward", "maxpool2d", "maxpool2d_backward", "sigmoid",
    "silu", "silu_backward", "split_channels", "upsample_nearest_2x",
    "upsample_nearest_2x_backward",
]

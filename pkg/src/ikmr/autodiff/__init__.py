"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .tensor import (
    ConvLayout,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    grad_check,
    group_mean,
    hemisphere_sign,
    leaky_relu,
    mean,
    mse,
    mul,
    normalize_last,
    qconj,
    qmul,
    qrotate,
    reshape,
    scale,
    skeletal_conv_op,
    stack,
    sub,
    sum,
    take,
    temporal_conv1d,
    tensor,
    time_pool2,
    time_upsample2,
    transpose,
    zero_grad,
)

__all__ = [
    "ConvLayout", "Tape", "Tensor", "add", "as_tensor", "backward", "broadcast_to", "concat",
    "grad_check", "group_mean", "hemisphere_sign", "leaky_relu", "mean", "mse", "mul",
    "normalize_last", "qconj", "qmul", "qrotate", "reshape", "scale", "skeletal_conv_op",
    "stack", "sub", "sum", "take", "temporal_conv1d", "tensor", "time_pool2",
    "time_upsample2", "transpose", "zero_grad",
]

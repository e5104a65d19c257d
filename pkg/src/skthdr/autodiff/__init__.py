from .gradcheck import gradcheck, numerical_gradient
from .nn import (
    avg_pool2d,
    conv2d,
    max_pool2d,
    pixel_shuffle,
    pixel_unshuffle,
    resize,
    upsample_nearest,
)
from .tensor import (
    Function,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    div,
    exp,
    expm1,
    is_grad_enabled,
    leaky_relu,
    log,
    log1p,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    square,
    stack,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "Function", "Tensor", "absolute", "add", "as_tensor", "avg_pool2d", "backward",
    "broadcast_to", "clip", "concat", "conv2d", "div", "exp", "expm1", "gradcheck",
    "is_grad_enabled", "leaky_relu", "log", "log1p", "matmul", "max_pool2d", "mean", "mul",
    "no_grad", "numerical_gradient", "pixel_shuffle", "pixel_unshuffle", "relu",
    "reshape", "resize", "sigmoid", "softmax", "sqrt", "square", "stack", "sub",
    "transpose", "tsum", "upsample_nearest",
]

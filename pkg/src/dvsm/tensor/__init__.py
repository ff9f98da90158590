from .core import (
    DEFAULT_DTYPE,
    GradientError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
    concat,
    exp,
    getitem,
    log,
    matmul,
    mean,
    reshape,
    set_finite_check,
    sigmoid,
    sqrt,
    stack,
    tanh,
    tensor,
    transpose,
    tsum,
)
from .functional import (
    attention,
    bilinear_resize,
    gelu,
    l2_normalize,
    layer_norm,
    linear,
    mse,
    patchify,
    resize_matrix,
    softmax,
    unpatchify,
)
from .gradcheck import grad_check
from .optim import AdamWState, LrSchedule, adamw_step, clip_grad_norm, lr_at
from .serialize import ContainerError

__all__ = [
    "DEFAULT_DTYPE", "GradientError", "NonFiniteError", "ShapeError", "Tape", "Tensor",
    "active_tape", "backward", "concat", "exp", "getitem", "log", "matmul", "mean",
    "reshape", "set_finite_check", "sigmoid", "sqrt", "stack", "tanh", "tensor",
    "transpose", "tsum", "attention", "bilinear_resize", "gelu", "l2_normalize",
    "layer_norm", "linear", "mse", "patchify", "resize_matrix", "softmax", "unpatchify",
    "grad_check", "AdamWState", "LrSchedule", "adamw_step", "clip_grad_norm", "lr_at",
    "ContainerError",
]

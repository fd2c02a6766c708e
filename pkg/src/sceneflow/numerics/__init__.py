from .layers import conv2d, conv2d_stride2, instance_norm
from .optim import AdamState, adam_step
from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    div,
    exp,
    fill_nonpositive,
    gather_max,
    gather_rows,
    getitem,
    grad_enabled,
    l2_normalize,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reduce_max,
    reduce_sum,
    reshape,
    sqrt,
    sub,
    transpose,
)

__all__ = [
    "AdamState",
    "Tensor",
    "absolute",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "clamp_min",
    "concat",
    "conv2d",
    "conv2d_stride2",
    "div",
    "exp",
    "fill_nonpositive",
    "gather_max",
    "gather_rows",
    "getitem",
    "grad_enabled",
    "instance_norm",
    "l2_normalize",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "reduce_max",
    "reduce_sum",
    "reshape",
    "sqrt",
    "sub",
    "transpose",
]

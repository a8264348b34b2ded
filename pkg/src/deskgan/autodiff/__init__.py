from .optim import ParameterStore, adam_step
from .tensor import (
    DoubleBackwardError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    add_scalar,
    embed_axis,
    fold,
    unfold,
    set_grad_enabled,
    backward,
    concat,
    conv2d,
    div,
    down2,
    exp,
    expand,
    grad,
    leaky_relu,
    log,
    matmul,
    mean,
    minibatch_stddev,
    mul,
    neg,
    no_grad,
    pixelnorm,
    reshape,
    resample,
    scale,
    sigmoid,
    slice_axis,
    sqrt,
    square,
    sub,
    transpose,
    tsum,
    up2,
)

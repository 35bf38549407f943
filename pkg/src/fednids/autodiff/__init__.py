from .optim import Adam, AdamState, NonFiniteGradientError, adam_step
from .tensor import (
    GradError,
    ShapeError,
    Tensor,
    absolute,
    add,
    as_tensor,
    broadcast_to,
    clamp,
    div,
    exp,
    global_norm,
    grad,
    inner,
    is_recording,
    l2_norm,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    power,
    recording,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    sqrt,
    sub,
    sum_to,
    tanh,
    tmax,
    tmin,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]

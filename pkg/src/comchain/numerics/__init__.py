from .optim import NonFiniteGradientError, OptimState, adamw_step, cosine_lr
from .rng import make_rng, truncated_normal
from .tensor import (
    PRIMITIVES,
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    concat,
    exp,
    gelu,
    grad_check,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    primitive,
    reshape,
    scale,
    slice_,
    softmax,
    sum_,
    sum_of_squares,
    take,
    transpose,
    value_and_grad,
)

from .params import TAGS, Param, ParameterStore, tensor_digest
from .rng import RngStream, derive_seed
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    conv3d,
    default_dtype,
    div,
    exp,
    finite_checks,
    get_default_dtype,
    getitem,
    group_norm,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    resample2x,
    reshape,
    set_default_dtype,
    silu,
    softmax_lastdim,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)

from flowvi.numcore.tensor import (
    DTYPE,
    Tape,
    Tensor,
    abs,
    add,
    as_tensor,
    backward,
    broadcast_to,
    clip,
    concat,
    cumsum,
    div,
    dropout,
    embedding,
    exp,
    gelu,
    getitem,
    is_grad_enabled,
    layer_norm,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    ones,
    parameter,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    softplus,
    split,
    sqrt,
    square,
    stack,
    sub,
    swapaxes,
    take_along_axis,
    tanh,
    transpose,
    tsum,
    where,
    zeros,
)
from flowvi.numcore.gradcheck import GradCheckError, GradCheckReport, grad_check, sample_coords
from flowvi.numcore.nn import ACTIVATIONS, MLP, LayerNorm, Linear, MaskedLinear, Module

sum = tsum  # noqa: A001

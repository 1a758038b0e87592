"""Float64 dense tensors with tape-based reverse-mode autodiff."""

from . import ops
from .autograd import (
    ContractError,
    DimensionError,
    ParameterError,
    Tape,
    TapeEntry,
    Tensor,
    TensorError,
    backward,
    current_tape,
    fresh_tape,
    is_grad_enabled,
    no_grad,
)
from .ops import (
    add,
    apply_mask,
    cross_entropy,
    embedding,
    gelu,
    kl_divergence,
    layer_norm,
    linear,
    log_softmax,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax,
    softmax_array,
    sub,
    transpose,
)
from .optim import Adam, clip_grad_norm, global_grad_norm

__all__ = [
    "Adam",
    "ContractError",
    "DimensionError",
    "ParameterError",
    "Tape",
    "TapeEntry",
    "Tensor",
    "TensorError",
    "add",
    "apply_mask",
    "backward",
    "clip_grad_norm",
    "cross_entropy",
    "current_tape",
    "embedding",
    "fresh_tape",
    "gelu",
    "global_grad_norm",
    "is_grad_enabled",
    "kl_divergence",
    "layer_norm",
    "linear",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "ops",
    "reshape",
    "scale",
    "softmax",
    "softmax_array",
    "sub",
    "transpose",
]

from .tensor import (
    Tensor,
    tensor,
    as_tensor,
    backward,
    gradients,
    default_dtype,
    set_default_dtype,
    dtype_scope,
)
from .ops import (
    ACTIVATIONS,
    activation,
    add,
    batch_norm,
    conv2d,
    div,
    flatten,
    gather_rows,
    log_softmax,
    masked_row_max,
    matmul,
    mean,
    mean_pool,
    mul,
    neg,
    relu,
    reshape,
    scale,
    softmax,
    sum_,
)
from .losses import kl_divergence, softmax_cross_entropy

__all__ = [
    "ACTIVATIONS",
    "Tensor",
    "activation",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "conv2d",
    "div",
    "default_dtype",
    "dtype_scope",
    "flatten",
    "gather_rows",
    "gradients",
    "kl_divergence",
    "log_softmax",
    "masked_row_max",
    "matmul",
    "mean",
    "mean_pool",
    "mul",
    "neg",
    "relu",
    "reshape",
    "scale",
    "set_default_dtype",
    "softmax",
    "softmax_cross_entropy",
    "sum_",
    "tensor",
]

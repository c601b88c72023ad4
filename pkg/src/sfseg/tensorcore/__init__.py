from .functional import (
    NO_LABEL,
    NormMode,
    NormStats,
    add,
    conv2d,
    entropy,
    hard_ce_masked,
    instance_norm,
    log_softmax,
    mean,
    mul,
    relu,
    soft_ce,
    softmax,
)
from .optim import OptimizerState, poly_lr, sgd_step, zero_grad
from .tensor import Tape, Tensor, as_tensor, backward, get_default_dtype, no_grad, set_default_dtype

__all__ = [
    "NO_LABEL",
    "NormMode",
    "NormStats",
    "OptimizerState",
    "Tape",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "conv2d",
    "entropy",
    "get_default_dtype",
    "hard_ce_masked",
    "instance_norm",
    "log_softmax",
    "mean",
    "mul",
    "no_grad",
    "poly_lr",
    "relu",
    "set_default_dtype",
    "sgd_step",
    "soft_ce",
    "softmax",
    "zero_grad",
]

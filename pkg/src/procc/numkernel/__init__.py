from .autograd import Tape, Var, backward, detach
from .gradcheck import finite_diff_check
from .ops import (
    PROB_FLOOR,
    ShapeError,
    conv1d_rows,
    conv1d_same,
    cross_entropy,
    log_softmax,
    matmul,
    relu,
    resolve_kernel_size,
    softmax,
)
from .optim import OptimState, ParamStore, optimizer_step

__all__ = [
    "PROB_FLOOR",
    "OptimState",
    "ParamStore",
    "ShapeError",
    "Tape",
    "Var",
    "backward",
    "conv1d_rows",
    "conv1d_same",
    "cross_entropy",
    "detach",
    "finite_diff_check",
    "log_softmax",
    "matmul",
    "optimizer_step",
    "relu",
    "resolve_kernel_size",
    "softmax",
]

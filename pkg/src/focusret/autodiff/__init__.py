"""Reverse-mode autodiff over float64 arrays with saved-activation accounting."""

from . import ops
from .gradcheck import check_gradients, numeric_grad, relative_error
from .ops import (
    add,
    clamp_min,
    concat,
    embedding_lookup,
    exp,
    gelu,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    reshape,
    scalar_mul,
    slice,
    softmax,
    sub,
    swap_last,
    transpose,
)
from .ops import sum as reduce_sum
from .tape import (
    PRIMITIVES,
    MemoryReport,
    Tape,
    TapeEntry,
    backward,
    current_scope,
    current_tape,
    scope,
    tape_report,
)
from .tensor import Tensor, as_tensor

__all__ = [
    "PRIMITIVES",
    "MemoryReport",
    "Tape",
    "TapeEntry",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "check_gradients",
    "clamp_min",
    "concat",
    "current_scope",
    "current_tape",
    "embedding_lookup",
    "exp",
    "gelu",
    "l2_normalize",
    "layer_norm",
    "log",
    "matmul",
    "mean",
    "mul",
    "numeric_grad",
    "ops",
    "reduce_sum",
    "relative_error",
    "reshape",
    "scalar_mul",
    "scope",
    "slice",
    "softmax",
    "sub",
    "swap_last",
    "tape_report",
    "transpose",
]

"""Dense tensors, reverse-mode tape, sparse shifted solves and Adam."""
from .optim import AdamState, adam_step
from .sparse import DENSE_LIMIT, SolverError, SparseMatrix, solve_spd
from .tensor import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    exp,
    gather_add,
    leaky_relu,
    log_softmax_rows,
    matmul,
    max_axis,
    mean_all,
    mul,
    pair_sqdist,
    reshape,
    rsqrt_or_zero,
    scale,
    scatter_rows,
    segment_mean,
    segment_sum,
    softmax_rows,
    sqdist_matrix,
    sub,
    sum_all,
    take,
    transpose,
)

__all__ = [
    "AdamState", "ContractError", "DENSE_LIMIT", "ShapeError", "SolverError",
    "SparseMatrix", "Tape", "Tensor", "adam_step", "add", "as_tensor",
    "backward", "concat", "cross_entropy", "exp", "gather_add", "leaky_relu",
    "log_softmax_rows", "matmul", "max_axis", "mean_all", "mul",
    "pair_sqdist", "reshape", "rsqrt_or_zero", "scale", "scatter_rows",
    "segment_mean", "segment_sum", "softmax_rows", "solve_spd",
    "sqdist_matrix", "sub", "sum_all", "take", "transpose",
]

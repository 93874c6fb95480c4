"""
Numerical core: float64 tensors, tape-based reverse mode, gradient checks
and the named-tensor checkpoint container.
"""

from .tensor import (
    Tape,
    Tensor,
    add,
    add_bias,
    backward,
    block_apply,
    block_scores,
    concat_cols,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    matmul,
    mixture_softmax,
    mul,
    no_grad,
    row_softmax,
    scale,
    slice_cols,
    sum_all,
    take_rows,
    tanh,
    token_nll,
    transpose,
    zero_grad,
)
from .gradcheck import grad_check
from .checkpoint import load_tensors, save_tensors, file_sha256

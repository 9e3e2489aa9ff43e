"""Minimal reverse-mode tensor substrate."""

from . import ops
from .gradcheck import GradcheckReport, gradcheck
from .ops import (
    add,
    add_scalar,
    bilinear_resize,
    broadcast_to,
    concat,
    conv2d,
    conv_transpose2d,
    div,
    gelu,
    index,
    layernorm,
    linear,
    matmul,
    mean_all,
    mul,
    pad2d,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softplus,
    stack,
    sub,
    sum_all,
    swap_last,
    transpose,
)
from .tensor import (
    ConfigurationError,
    DimensionError,
    NumericalError,
    Tensor,
    UsageError,
    backward,
    dtype_scope,
    from_op,
    no_grad,
)

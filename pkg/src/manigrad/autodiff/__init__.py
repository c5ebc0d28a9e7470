from .functional import backward, grad, jacobian, jvp, second_order_grad, value_and_grad, vjp
from .tensor import (
    Tensor,
    add,
    as_tensor,
    blur_matrix,
    broadcast_to,
    concat,
    cos,
    elu,
    exp,
    gaussian_blur,
    guided_relu,
    index,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    reciprocal,
    relu,
    reshape,
    scale,
    set_grad_enabled,
    shift,
    sigmoid,
    silu,
    sin,
    softplus,
    sqrt,
    square,
    sub,
    sum,
    tanh,
    transpose,
)

__all__ = [
    "Tensor", "add", "as_tensor", "backward", "blur_matrix", "broadcast_to", "concat", "cos",
    "elu", "exp", "gaussian_blur", "grad", "guided_relu", "index", "is_grad_enabled",
    "jacobian", "jvp", "log", "matmul", "mean", "mul", "no_grad", "reciprocal", "relu",
    "reshape", "scale", "second_order_grad", "set_grad_enabled", "shift", "sigmoid", "silu",
    "sin", "softplus", "sqrt", "square", "sub", "sum", "tanh", "transpose", "value_and_grad",
    "vjp",
]

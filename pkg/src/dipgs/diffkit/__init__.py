from .tensor import (
    GraphError,
    NonFiniteError,
    Tensor,
    absolute,
    add,
    amin,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    getitem,
    is_grad_enabled,
    log,
    make,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sqrt,
    stack,
    sub,
    transpose,
    tsum,
    unbroadcast,
    where,
)
from .nn import (
    activation,
    bilinear_matrix,
    conv2d,
    leaky_relu,
    normalize,
    safe_exp,
    separable_map,
    sigmoid,
    tanh,
    upsample_bilinear,
)
from .gradcheck import check_directional, check_gradients, numerical_gradient, relative_error

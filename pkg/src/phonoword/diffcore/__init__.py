from .gradcheck import check_param_gradients, finite_difference_gradient, relative_error
from .layers import (
    Params,
    conv,
    feed_forward,
    init_attention,
    init_conv,
    init_layer_norm,
    init_linear,
    init_transformer_layer,
    linear,
    multi_head_attention,
    new_param,
    norm,
    padding_mask,
    sinusoidal_positions,
    transformer_layer,
)
from .optim import Adam, Schedule
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    absolute,
    as_tensor,
    assert_finite,
    concat,
    conv1d,
    conv_output_length,
    custom_op,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    softmax,
    stack,
    tanh,
    where,
)

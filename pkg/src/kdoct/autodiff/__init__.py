from . import functional
from .functional import (
    conv2d,
    depthwise_conv2d,
    drop_path,
    dropout,
    flatten,
    gelu,
    global_avg_pool,
    global_response_norm,
    layer_norm,
    linear,
    log_softmax,
    relu,
    sigmoid,
    softmax_with_temperature,
)
from .gradcheck import check_parameter_gradients, gradcheck, numerical_gradient, relative_error
from .tensor import Graph, Tensor, backward, current_graph, is_grad_enabled, no_grad

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "check_parameter_gradients",
    "conv2d",
    "current_graph",
    "depthwise_conv2d",
    "drop_path",
    "dropout",
    "flatten",
    "functional",
    "gelu",
    "global_avg_pool",
    "global_response_norm",
    "gradcheck",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "log_softmax",
    "no_grad",
    "numerical_gradient",
    "relative_error",
    "relu",
    "sigmoid",
    "softmax_with_temperature",
]

"""Neural-network building blocks with hand-written forward/backward passes."""

from .gradcheck import grad_check
from .init import xavier_init
from .layers import (
    col2im,
    conv2d_backward,
    conv2d_forward,
    conv2d_transpose_backward,
    conv2d_transpose_forward,
    conv_output_size,
    dense_backward,
    dense_forward,
    im2col,
    maxpool_backward,
    maxpool_forward,
    relu,
    relu_grad,
    sigmoid,
    sigmoid_grad_from_out,
    tanh,
)
from .losses import mse_loss, softmax, softmax_cross_entropy
from .recurrent import (
    lstm_sequence,
    lstm_sequence_backward,
    lstm_step,
    lstm_step_backward,
)

__all__ = [
    "col2im",
    "conv2d_backward",
    "conv2d_forward",
    "conv2d_transpose_backward",
    "conv2d_transpose_forward",
    "conv_output_size",
    "dense_backward",
    "dense_forward",
    "grad_check",
    "im2col",
    "lstm_sequence",
    "lstm_sequence_backward",
    "lstm_step",
    "lstm_step_backward",
    "maxpool_backward",
    "maxpool_forward",
    "mse_loss",
    "relu",
    "relu_grad",
    "sigmoid",
    "sigmoid_grad_from_out",
    "softmax",
    "softmax_cross_entropy",
    "tanh",
    "xavier_init",
]

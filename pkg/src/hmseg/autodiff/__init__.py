from .tensor import (Tensor, Tape, Node, tape, reset_tape, no_grad, backward,
                     precision, precision_mode, set_precision, current_dtype)
from .ops import (as_tensor, conv2d, group_norm, bilinear_resize, elementwise,
                  add, mul, sub, activation, relu, sigmoid, softmax_channels,
                  cross_entropy_ignore, tensor_sum)
from .optim import sgd_step, zero_grads

__all__ = [
    "Tensor", "Tape", "Node", "tape", "reset_tape", "no_grad", "backward",
    "precision", "precision_mode", "set_precision", "current_dtype",
    "as_tensor", "conv2d", "group_norm", "bilinear_resize", "elementwise",
    "add", "mul", "sub", "activation", "relu", "sigmoid", "softmax_channels",
    "cross_entropy_ignore", "tensor_sum", "sgd_step", "zero_grads",
]

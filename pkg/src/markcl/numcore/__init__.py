"""Minimal tensor/autodiff substrate: layers, reverse mode, SGD."""
from ._backend import backend_name, set_backend
from .gradcheck import grad_check
from .ops import (
    BatchNormState,
    add,
    argmax_rows,
    batchnorm_forward,
    conv2d_forward,
    cross_entropy,
    dense_forward,
    flatten,
    maxpool2d,
    modulate,
    mul,
    relu,
    reshape,
    split_columns,
    tensor_sum,
)
from .optim import SGD, SgdConfig, sgd_step
from .tensor import Tensor, backward, float64_mode, no_grad

__all__ = [
    "BatchNormState", "SGD", "SgdConfig", "Tensor", "add", "argmax_rows", "backend_name",
    "backward", "batchnorm_forward", "conv2d_forward", "cross_entropy", "dense_forward",
    "flatten", "float64_mode", "grad_check", "maxpool2d", "modulate", "mul", "no_grad",
    "relu", "reshape", "set_backend", "sgd_step", "split_columns", "tensor_sum",
]

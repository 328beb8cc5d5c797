from . import functional
from .functional import (
    avg_pool2d,
    batch_norm,
    conv2d,
    cross_entropy,
    linear,
    max_pool2d,
    relu,
)
from .optim import Adam, adam_step
from .tensor import Parameter, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "Adam",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "avg_pool2d",
    "batch_norm",
    "conv2d",
    "cross_entropy",
    "functional",
    "grad_enabled",
    "linear",
    "max_pool2d",
    "no_grad",
    "relu",
]

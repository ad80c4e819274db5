"""A small reverse-mode differentiation engine on top of numpy."""

from polyneuron.autodiff import functional
from polyneuron.autodiff.nn import (
    BatchNorm2d,
    Conv2d,
    Flatten,
    GlobalAvgPool,
    Linear,
    MaxPool2d,
    Module,
    Parameter,
    Sequential,
)
from polyneuron.autodiff.optim import Adam
from polyneuron.autodiff.tensor import Tensor, as_tensor

__all__ = [
    "Adam",
    "BatchNorm2d",
    "Conv2d",
    "Flatten",
    "GlobalAvgPool",
    "Linear",
    "MaxPool2d",
    "Module",
    "Parameter",
    "Sequential",
    "Tensor",
    "as_tensor",
    "functional",
]

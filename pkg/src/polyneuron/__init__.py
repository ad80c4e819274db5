"""Learnable polyharmonic-spline activations on a small numpy autodiff engine."""

from polyneuron.activations import (
    APL,
    ActivationSpec,
    PolyNeuron,
    PolyNeuronR,
    RegularizerConfig,
    ReLU,
    Swish,
    init_relu_like,
    make_activation,
    regularizer_loss,
)
from polyneuron.estimator import PolyNeuronClassifier
from polyneuron.models import ModelSpec, build, count_activation_functions
from polyneuron.spline import (
    ControlPointSet,
    PolyharmonicSpline,
    SplineCoefficients,
    evaluate,
    evaluate_derivative_x,
    rbf,
    rbf_derivative,
    solve_coefficients,
    solve_vjp,
)
from polyneuron.train import TrainConfig, run_training

__version__ = "0.1.0"

__all__ = [
    "APL",
    "ActivationSpec",
    "ControlPointSet",
    "ModelSpec",
    "PolyNeuron",
    "PolyNeuronClassifier",
    "PolyNeuronR",
    "PolyharmonicSpline",
    "ReLU",
    "RegularizerConfig",
    "SplineCoefficients",
    "Swish",
    "TrainConfig",
    "build",
    "count_activation_functions",
    "evaluate",
    "evaluate_derivative_x",
    "init_relu_like",
    "make_activation",
    "rbf",
    "rbf_derivative",
    "regularizer_loss",
    "run_training",
    "solve_coefficients",
    "solve_vjp",
]

"""Central finite-difference checks of every backward path.

Each suite returns :class:`GradCheck` records; a check passes when at least
``min_fraction`` of the sampled coordinates have relative error within
``tol``.  Relative error is ``|a - n| / max(|a|, |n|, floor)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from polyneuron import spline
from polyneuron.activations import (
    ActivationSpec,
    RegularizerConfig,
    activations_of,
    init_relu_like,
    make_activation,
    regularizer_loss,
)
from polyneuron.autodiff import functional as F
from polyneuron.autodiff.nn import Linear, Module
from polyneuron.autodiff.tensor import Tensor
from polyneuron.models import ModelSpec, build

SPLINE_TOL = 1e-4
NETWORK_TOL = 1e-3
MIN_FRACTION = 0.99
KINDS = ("relu", "swish", "apl", "polyneuron", "polyneuron-r")


@dataclass
class GradCheck:
    name: str
    checked: int
    passed: int
    max_rel_error: float
    tol: float
    min_fraction: float = MIN_FRACTION

    @property
    def fraction(self):
        return self.passed / self.checked if self.checked else 1.0

    @property
    def ok(self):
        return self.checked > 0 and self.fraction >= self.min_fraction

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        return (
            f"[{status}] {self.name}: {self.passed}/{self.checked} within {self.tol:g} "
            f"(max rel err {self.max_rel_error:.2e})"
        )


def relative_error(analytic, numeric, floor):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _summarise(name, errors, tol):
    errors = np.concatenate([np.ravel(e) for e in errors]) if errors else np.zeros(0)
    return GradCheck(name, errors.size, int((errors <= tol).sum()), float(errors.max(initial=0.0)), tol)


def random_control_points(rng, s, spread=2.0, min_gap=0.25):
    """Sorted abscissae on ``[-spread, spread]`` at least ``min_gap`` apart."""
    while True:
        xs = np.sort(rng.uniform(-spread, spread, s))
        if np.min(np.diff(xs)) >= min_gap:
            return xs, rng.normal(size=s)


def spline_suite(n_instances=100, seed=0, sizes=(3, 5, 7), orders=(1, 2, 3), h=1e-6, floor=1e-5):
    """Derivative in ``x`` and the solve adjoint against central differences."""
    rng = np.random.default_rng(seed)
    dx_err, vjp_err = [], []
    for s in sizes:
        for k in orders:
            for _ in range(n_instances):
                xs, ys = random_control_points(rng, s)
                cps = spline.ControlPointSet(tuple(xs), tuple(ys))
                co = spline.solve_coefficients(cps, k)
                x = rng.uniform(-3, 3)
                step = h * max(1.0, abs(x))
                numeric = (spline.evaluate(x + step, cps, co, k) - spline.evaluate(x - step, cps, co, k)) / (2 * step)
                dx_err.append(relative_error(spline.evaluate_derivative_x(x, cps, co, k), numeric, floor))

                gw, gv = rng.normal(size=s), rng.normal(size=2)

                def objective(px, py):
                    w, v = spline.solve_coefficients_batch(px[None], py[None], k)
                    return float(w[0] @ gw + v[0] @ gv)

                xs_bar, ys_bar = spline.solve_vjp(cps, k, co, gw, gv)
                num_x, num_y = np.empty(s), np.empty(s)
                for i in range(s):
                    e = np.zeros(s)
                    e[i] = h * max(1.0, abs(xs[i]))
                    num_x[i] = (objective(xs + e, ys) - objective(xs - e, ys)) / (2 * e[i])
                    e[i] = h * max(1.0, abs(ys[i]))
                    num_y[i] = (objective(xs, ys + e) - objective(xs, ys - e)) / (2 * e[i])
                vjp_err.append(relative_error(xs_bar, num_x, floor))
                vjp_err.append(relative_error(ys_bar, num_y, floor))
    return [
        _summarise("spline.evaluate_derivative_x", dx_err, SPLINE_TOL),
        _summarise("spline.solve_vjp", vjp_err, SPLINE_TOL),
    ]


def _refresh(module):
    for act in activations_of(module) if isinstance(module, Module) else ():
        act.refresh()


def check_parameters(module, loss_fn, rng, name, tol, inputs=(), per_tensor=None, h_rel=1e-6, floor=1e-6):
    """Compare backprop with central differences for ``module``'s parameters
    and any extra leaf tensors in ``inputs``.

    ``per_tensor`` caps the number of sampled coordinates per tensor.
    """
    _refresh(module)
    tensors = list(module.parameters()) + list(inputs)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    errors = []
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if per_tensor is not None and flat.size > per_tensor:
            idx = rng.choice(flat.size, per_tensor, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            step = h_rel * max(1.0, abs(orig))
            flat[i] = orig + step
            _refresh(module)
            up = float(loss_fn().item())
            flat[i] = orig - step
            _refresh(module)
            down = float(loss_fn().item())
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        _refresh(module)
        errors.append(relative_error(grad.reshape(-1)[idx], numeric, floor))
    return _summarise(name, errors, tol)


def _jitter(module, rng, scale=0.05):
    for act in activations_of(module):
        for p in act.parameters():
            p.data += rng.normal(scale=scale, size=p.shape).astype(p.dtype)
        act.refresh()


def activation_suite(seed=0):
    """Backward of each activation kind w.r.t. its input and parameters."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in KINDS:
        act = make_activation(ActivationSpec(kind), 3, rng, dtype=np.float64)
        _jitter(act, rng)
        x = Tensor(rng.normal(scale=1.5, size=(4, 3, 2, 2)), requires_grad=True)
        g = rng.normal(size=x.shape)

        def loss():
            return (act(x) * g).sum()

        out.append(check_parameters(act, loss, rng, f"activation.{kind}", SPLINE_TOL, inputs=(x,)))
    # the ReLU-like initial state exactly, shared by both spline kinds
    for kind in ("polyneuron", "polyneuron-r"):
        act = init_relu_like(kind, 3, 3, units=2)
        x = Tensor(rng.uniform(-2.5, 2.5, size=(5, 2)), requires_grad=True)
        g = rng.normal(size=x.shape)
        out.append(
            check_parameters(
                act, lambda: (act(x) * g).sum(), rng, f"activation.{kind}.relu_like", SPLINE_TOL, inputs=(x,)
            )
        )
    return out


class ToyMLP(Module):
    def __init__(self, spec, rng, n_in=6, hidden=8, n_out=3, dtype=np.float64):
        self.fc1 = Linear(n_in, hidden, rng, dtype)
        self.act = make_activation(spec, hidden, rng, dtype)
        self.fc2 = Linear(hidden, n_out, rng, dtype)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def _loss_with_regularizer(model, x, y, reg):
    def loss():
        total = F.softmax_cross_entropy(model(x), y)
        r = regularizer_loss(activations_of(model), reg)
        return total + r if r.requires_grad else total

    return loss


def network_suite(seed=0, kinds=KINDS, lenet=True, resnet=False, per_tensor=12, h_rel=1e-6, jitter=0.02):
    """Whole-model gradients: a toy MLP, one LeNet-5 batch and optionally a
    reduced ResNet-20, for each activation kind (float64).

    Activation parameters are jittered by ``jitter`` so the relaxed side
    conditions are not exactly satisfied; larger jitter lets the cubic tails
    compound across layers until the loss is too large for differencing.
    """
    rng = np.random.default_rng(seed)
    reg = RegularizerConfig(lambda_prod=0.05, lambda_sum=0.05)
    out = []
    for kind in kinds:
        spec = ActivationSpec(kind)
        mlp = ToyMLP(spec, rng).assign_paths()
        _jitter(mlp, rng, jitter)
        x = Tensor(rng.normal(size=(5, 6)))
        y = rng.integers(0, 3, 5)
        out.append(
            check_parameters(
                mlp, _loss_with_regularizer(mlp, x, y, reg), rng, f"network.mlp.{kind}", NETWORK_TOL, h_rel=h_rel
            )
        )
        if lenet:
            net = build(ModelSpec("lenet5", spec), seed=seed, dtype=np.float64)
            _jitter(net, rng, jitter)
            xb = Tensor(rng.normal(scale=0.5, size=(2, 1, 28, 28)))
            yb = rng.integers(0, 10, 2)
            out.append(
                check_parameters(
                    net, _loss_with_regularizer(net, xb, yb, reg), rng, f"network.lenet5.{kind}",
                    NETWORK_TOL, per_tensor=per_tensor, h_rel=h_rel,
                )
            )
        if resnet:
            net = build(ModelSpec("resnet20", spec), seed=seed, dtype=np.float64, width=2, blocks_per_stage=1)
            _jitter(net, rng, jitter)
            xb = Tensor(rng.normal(scale=0.5, size=(3, 3, 32, 32)))
            yb = rng.integers(0, 10, 3)
            out.append(
                check_parameters(
                    net, _loss_with_regularizer(net, xb, yb, reg), rng, f"network.resnet20.{kind}",
                    NETWORK_TOL, per_tensor=per_tensor, h_rel=h_rel,
                )
            )
    return out


SUITES = {
    "spline": spline_suite,
    "activation": activation_suite,
    "network": network_suite,
}


def run_all(seed=0, suites=("spline", "activation", "network")):
    results = []
    for name in suites:
        results.extend(SUITES[name](seed=seed))
    return results

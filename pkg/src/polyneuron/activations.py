"""Learnable activation layers.

Each layer owns one parameter set per *unit*: a channel of a conv feature
map, a feature of a dense layer, or (with ``sharing="layer"``) the whole
layer.  Spline parameters are stored as ``(units, s)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from polyneuron import spline
from polyneuron.autodiff.nn import Module, Parameter
from polyneuron.autodiff.tensor import Tensor, _unbroadcast
from polyneuron.exceptions import ConfigError, StaleCacheError, UsageError

KINDS = ("relu", "swish", "apl", "polyneuron", "polyneuron-r")
SHARING = ("channel", "layer")


@dataclass(frozen=True)
class ActivationSpec:
    """Which activation to build and how finely its parameters are shared."""

    kind: str = "relu"
    sharing: str = "channel"
    s: int = 3
    k: int = 3
    apl_hinges: int = 2
    swish_beta: float = 1.0

    def __post_init__(self):
        kind = self.kind.lower().replace("_", "-")
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigError(f"unknown activation {self.kind!r}; expected one of {KINDS}")
        if self.sharing not in SHARING:
            raise ConfigError(f"unknown sharing {self.sharing!r}; expected one of {SHARING}")
        if self.s < 2:
            raise ConfigError(f"need at least 2 control points, got s={self.s}")
        if self.k < 1:
            raise ConfigError(f"polyharmonic order must be >= 1, got k={self.k}")


@dataclass(frozen=True)
class RegularizerConfig:
    lambda_prod: float = 0.0
    lambda_sum: float = 1e-2

    def __post_init__(self):
        if self.lambda_prod < 0 or self.lambda_sum < 0:
            raise ConfigError("regularisation strengths must be nonnegative")


def _unit_shape(x_ndim, units, trailing=()):
    return (1, units) + (1,) * (x_ndim - 2) + tuple(trailing)


def _reduce(grad, expanded_shape, units, trailing=()):
    return _unbroadcast(grad, expanded_shape).reshape((units,) + tuple(trailing))


def _odd_pow(r, k):
    out = r
    for _ in range(k - 1):
        out = out * r
    return out


def _kernel_terms(d, k):
    """``U_k(|d|)`` and ``U_k'(|d|) * sign(d)`` elementwise."""
    r = np.abs(d)
    if k == 1:
        return r, np.sign(d)
    if k % 2:
        rk2 = _odd_pow(r, k - 2)
        return rk2 * r * r, k * d * rk2
    return spline.rbf_array(r, k), spline.rbf_derivative_array(r, k) * np.sign(d)


def relu_like_points(s):
    """Evenly spaced abscissae on [-1, 1] and their ReLU values."""
    if s < 2:
        raise UsageError(f"need at least 2 control points, got s={s}")
    if s == 3:
        xs = np.array([-1.0, 0.0, 1.0])
    else:
        xs = np.linspace(-1.0, 1.0, s)
    return xs, np.maximum(xs, 0.0)


class Activation(Module):
    kind = "base"

    def __init__(self, units=1):
        self.units = int(units)

    def check_input(self, x):
        if x.ndim < 2 or (self.units != 1 and x.shape[1] != self.units):
            raise UsageError(f"{self.kind}: expected {self.units} channels, got input shape {x.shape}")

    def unit_curves(self, grid):
        """Values of every unit's function on ``grid``, shape ``(units, len(grid))``."""
        grid = np.asarray(grid, dtype=np.float64)
        x = Tensor(np.broadcast_to(grid, (self.units, grid.size))[None].copy())
        saved = self.training
        self.training = False
        try:
            return np.asarray(self.forward(x).data[0], dtype=np.float64)
        finally:
            self.training = saved

    def describe_unit(self, u):
        return {}

    def refresh(self):
        """Bring derived state up to date with the parameters (no-op by default)."""


class ReLU(Activation):
    kind = "relu"

    def forward(self, x):
        mask = x.data > 0
        return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


class Swish(Activation):
    """``x * sigmoid(beta * x)`` with a trainable ``beta`` per unit."""

    kind = "swish"

    def __init__(self, units=1, beta=1.0, dtype=np.float32):
        super().__init__(units)
        self.beta = Parameter(np.full(units, beta, dtype=dtype), decay_exempt=True)

    def forward(self, x):
        self.check_input(x)
        shape = _unit_shape(x.ndim, self.units)
        b = self.beta.data.reshape(shape)
        sig = 0.5 * (1.0 + np.tanh(0.5 * b * x.data))  # overflow-free sigmoid
        out = x.data * sig

        def backward(g):
            ds = sig * (1.0 - sig)
            gx = g * (sig + b * x.data * ds)
            gb = _reduce(g * x.data * x.data * ds, shape, self.units)
            return gx, gb

        return Tensor.from_op(out, (x, self.beta), backward, "swish")

    def describe_unit(self, u):
        return {"beta": float(self.beta.data[u])}


class APL(Activation):
    """Adaptive piecewise linear: ``max(0, x) + sum_i a_i max(0, b_i - x)``."""

    kind = "apl"

    def __init__(self, units=1, hinges=2, rng=None, dtype=np.float32):
        super().__init__(units)
        rng = np.random.default_rng(0) if rng is None else rng
        self.a = Parameter(rng.uniform(-0.1, 0.1, (units, hinges)).astype(dtype), decay_exempt=True)
        self.b = Parameter(rng.uniform(-1.0, 1.0, (units, hinges)).astype(dtype), decay_exempt=True)

    def forward(self, x):
        self.check_input(x)
        hinges = self.a.shape[1]
        shape = _unit_shape(x.ndim, self.units, (hinges,))
        a = self.a.data.reshape(shape)
        b = self.b.data.reshape(shape)
        gap = b - x.data[..., None]
        active = gap > 0
        out = np.maximum(x.data, 0) + (a * gap * active).sum(axis=-1)

        def backward(g):
            ge = g[..., None]
            gx = g * (x.data > 0) - (ge * a * active).sum(axis=-1)
            ga = _reduce(ge * gap * active, shape, self.units, (hinges,))
            gb = _reduce(ge * a * active, shape, self.units, (hinges,))
            return gx, ga, gb

        return Tensor.from_op(out.astype(x.dtype, copy=False), (x, self.a, self.b), backward, "apl")

    def describe_unit(self, u):
        return {"a": self.a.data[u].tolist(), "b": self.b.data[u].tolist()}


def _spline_forward(x, xs, w, v0, v1, k, units):
    """Shared forward for both spline activations.

    Returns the output array and a function mapping the output adjoint to
    ``(gx, gxs, gw, gv0, gv1)`` with parameter grads reduced to unit shape.
    """
    s = xs.shape[-1]
    sh = _unit_shape(x.ndim, units, (s,))
    su = _unit_shape(x.ndim, units)
    xs_e = xs.reshape(sh)
    w_e = w.reshape(sh)
    d = x[..., None] - xs_e
    u, du = _kernel_terms(d, k)
    out = (w_e * u).sum(axis=-1) + v0.reshape(su) * x + v1.reshape(su)

    def backward(g):
        ge = g[..., None]
        wdu = w_e * du
        gx = g * (wdu.sum(axis=-1) + v0.reshape(su))
        gxs = -_reduce(ge * wdu, sh, units, (s,))
        gw = _reduce(ge * u, sh, units, (s,))
        gv0 = _reduce(g * x, su, units)
        gv1 = _reduce(g, su, units)
        return gx, gxs, gw, gv0, gv1

    return out, backward


class PolyNeuron(Activation):
    """Spline activation through trainable control points.

    The interpolating coefficients are solved in float64 by :meth:`refresh`,
    which the trainer calls once after every optimizer step.  The backward
    pass differentiates through that solve with one adjoint solve per unit.
    """

    kind = "polyneuron"

    def __init__(self, units=1, s=3, k=3, dtype=np.float32):
        super().__init__(units)
        self.k = k
        px, py = relu_like_points(s)
        self.xs = Parameter(np.tile(px, (units, 1)).astype(dtype), decay_exempt=True)
        self.ys = Parameter(np.tile(py, (units, 1)).astype(dtype), decay_exempt=True)
        self._cache = None
        self.refresh()

    def refresh(self):
        xs = np.asarray(self.xs.data, dtype=np.float64)
        ys = np.asarray(self.ys.data, dtype=np.float64)
        knots, order = spline.separate(xs)
        w, v = spline.solve_coefficients_batch(knots, np.take_along_axis(ys, order, axis=1), self.k)
        self._cache = {
            "xs": self.xs.data.copy(),
            "ys": self.ys.data.copy(),
            "knots": knots,
            "order": order,
            "w": w,
            "v": v,
        }

    def coefficients(self):
        """Current ``(knots, w, v)`` in float64, sorted by knot."""
        self._check_fresh()
        c = self._cache
        return c["knots"], c["w"], c["v"]

    def _check_fresh(self):
        c = self._cache
        if c is None or not (np.array_equal(c["xs"], self.xs.data) and np.array_equal(c["ys"], self.ys.data)):
            raise StaleCacheError(
                f"{self._path or 'polyneuron'}: control points changed without refresh()"
            )

    def forward(self, x):
        self.check_input(x)
        self._check_fresh()
        c = self._cache
        dt = x.dtype
        out, spline_backward = _spline_forward(
            x.data,
            c["knots"].astype(dt),
            c["w"].astype(dt),
            c["v"][:, 0].astype(dt),
            c["v"][:, 1].astype(dt),
            self.k,
            self.units,
        )

        def backward(g):
            gx, gxs_direct, gw, gv0, gv1 = spline_backward(g)
            xs_bar, ys_bar = spline.solve_vjp_batch(
                c["knots"], self.k, c["w"], c["v"], gw, np.stack([gv0, gv1], axis=1)
            )
            xs_bar = xs_bar + gxs_direct
            gxs = np.empty_like(xs_bar)
            gys = np.empty_like(ys_bar)
            np.put_along_axis(gxs, c["order"], xs_bar, axis=1)
            np.put_along_axis(gys, c["order"], ys_bar, axis=1)
            return gx, gxs.astype(self.xs.dtype), gys.astype(self.ys.dtype)

        return Tensor.from_op(out, (x, self.xs, self.ys), backward, "polyneuron")

    def describe_unit(self, u):
        return {"xs": self.xs.data[u].tolist(), "ys": self.ys.data[u].tolist()}


class PolyNeuronR(Activation):
    """Relaxed spline activation: knots, weights and the affine term are all
    learned directly; the side conditions become soft penalties."""

    kind = "polyneuron-r"

    def __init__(self, units=1, s=3, k=3, dtype=np.float32):
        super().__init__(units)
        self.k = k
        px, py = relu_like_points(s)
        w, v = spline.solve_coefficients_batch(px[None], py[None], k)
        self.xs = Parameter(np.tile(px, (units, 1)).astype(dtype), decay_exempt=True)
        self.w = Parameter(np.tile(w[0], (units, 1)).astype(dtype), decay_exempt=True)
        self.v0 = Parameter(np.full(units, v[0, 0], dtype=dtype), decay_exempt=True)
        self.v1 = Parameter(np.full(units, v[0, 1], dtype=dtype), decay_exempt=True)

    def forward(self, x):
        self.check_input(x)
        out, spline_backward = _spline_forward(
            x.data, self.xs.data, self.w.data, self.v0.data, self.v1.data, self.k, self.units
        )
        return Tensor.from_op(
            out, (x, self.xs, self.w, self.v0, self.v1), spline_backward, "polyneuron-r"
        )

    def describe_unit(self, u):
        xs = self.xs.data[u].astype(np.float64)
        ys = self.unit_curves(xs)[u]
        return {
            "xs": xs.tolist(),
            "ys": ys.tolist(),
            "w": self.w.data[u].tolist(),
            "v0": float(self.v0.data[u]),
            "v1": float(self.v1.data[u]),
        }


def make_activation(spec: ActivationSpec, units: int, rng=None, dtype=np.float32) -> Activation:
    """Build the activation described by ``spec`` for a layer with ``units`` channels."""
    n = units if spec.sharing == "channel" else 1
    if spec.kind == "relu":
        return ReLU(n)
    if spec.kind == "swish":
        return Swish(n, beta=spec.swish_beta, dtype=dtype)
    if spec.kind == "apl":
        return APL(n, hinges=spec.apl_hinges, rng=rng, dtype=dtype)
    if spec.kind == "polyneuron":
        return PolyNeuron(n, s=spec.s, k=spec.k, dtype=dtype)
    return PolyNeuronR(n, s=spec.s, k=spec.k, dtype=dtype)


def init_relu_like(kind: str, s=3, k=3, units=1, dtype=np.float64) -> Activation:
    """ReLU-like initialised spline activation of either kind."""
    if s < 2:
        raise UsageError(f"need at least 2 control points, got s={s}")
    kind = kind.lower().replace("_", "-")
    if kind == "polyneuron":
        return PolyNeuron(units, s=s, k=k, dtype=dtype)
    if kind == "polyneuron-r":
        return PolyNeuronR(units, s=s, k=k, dtype=dtype)
    raise UsageError(f"ReLU-like initialisation applies to spline activations, not {kind!r}")


def activations_of(model):
    return [m for m in model.modules() if isinstance(m, Activation)]


def regularizer_loss(activations, cfg: RegularizerConfig = RegularizerConfig()) -> Tensor:
    """Mean absolute violation of the product and sum side conditions over all
    relaxed units, weighted by ``cfg``.  Zero when there are none."""
    relaxed = [a for a in activations if isinstance(a, PolyNeuronR)]
    n_units = sum(a.units for a in relaxed)
    if n_units == 0:
        return Tensor(np.zeros((), dtype=np.float64))
    total = None
    for act in relaxed:
        prod = (act.w * act.xs).sum(axis=1).abs().sum()
        plain = act.w.sum(axis=1).abs().sum()
        term = prod * (cfg.lambda_prod / n_units) + plain * (cfg.lambda_sum / n_units)
        total = term if total is None else total + term
    return total

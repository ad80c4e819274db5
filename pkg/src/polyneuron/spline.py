"""One-dimensional polyharmonic splines with exact first derivatives.

Everything here is a pure function of its inputs and works in float64.
The batched helpers (``*_batch``) take control points shaped ``(B, s)`` and
solve ``B`` independent systems at once; the single-spline functions are thin
wrappers used by tests and by :class:`PolyharmonicSpline`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from polyneuron.exceptions import DomainError, SingularSystemError

SEPARATION_EPS = 1e-4
COND_MAX = 1e12
TOL_INTERP = 1e-8
TOL_CONSTRAINT = 1e-9


@dataclass(frozen=True)
class ControlPointSet:
    """The ``s`` control points ``(x_i, y_i)`` of one activation unit."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]

    def __post_init__(self):
        xs = tuple(float(v) for v in self.xs)
        ys = tuple(float(v) for v in self.ys)
        if len(xs) != len(ys):
            raise ValueError(f"xs and ys differ in length: {len(xs)} != {len(ys)}")
        if len(xs) < 2:
            raise ValueError(f"need at least 2 control points, got {len(xs)}")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise DomainError("control points must be finite")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def size(self) -> int:
        return len(self.xs)


@dataclass(frozen=True)
class SplineCoefficients:
    w: tuple[float, ...]
    v0: float
    v1: float


def _check_order(k: int) -> int:
    if int(k) != k or k < 1:
        raise ValueError(f"polyharmonic order must be a positive integer, got {k!r}")
    return int(k)


def rbf_array(r: np.ndarray, k: int) -> np.ndarray:
    """Vectorised polyharmonic kernel; ``r`` is assumed nonnegative."""
    r = np.asarray(r)
    if k % 2:
        return r**k
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, safe**k * np.log(safe), 0.0).astype(r.dtype, copy=False)


def rbf_derivative_array(r: np.ndarray, k: int) -> np.ndarray:
    r = np.asarray(r)
    if k % 2:
        if k == 1:
            # constant slope, but 0 at the kink
            return np.where(r > 0, 1.0, 0.0).astype(r.dtype, copy=False)
        return k * r ** (k - 1)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, safe ** (k - 1) * (k * np.log(safe) + 1.0), 0.0).astype(
        r.dtype, copy=False
    )


def rbf(r: float, k: int) -> float:
    """Polyharmonic radial basis ``U_k(r)``; zero at the origin for every order."""
    k = _check_order(k)
    if not np.isfinite(r) or r < 0:
        raise DomainError(f"rbf radius must be finite and nonnegative, got {r!r}")
    return float(rbf_array(np.float64(r), k))


def rbf_derivative(r: float, k: int) -> float:
    k = _check_order(k)
    if not np.isfinite(r) or r < 0:
        raise DomainError(f"rbf radius must be finite and nonnegative, got {r!r}")
    return float(rbf_derivative_array(np.float64(r), k))


def separate(xs: np.ndarray, eps: float = SEPARATION_EPS):
    """Sort each row of ``xs`` and push neighbours at least ``eps`` apart.

    Returns ``(clamped_sorted_xs, order)`` where ``order`` is the argsort
    permutation.  Rows already sorted and separated come back unchanged.
    """
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, axis=-1, kind="stable")
    out = np.take_along_axis(xs, order, axis=-1).copy()
    for i in range(1, out.shape[-1]):
        out[..., i] = np.maximum(out[..., i], out[..., i - 1] + eps)
    return out, order


def system_matrix(xs: np.ndarray, k: int) -> np.ndarray:
    """Symmetric ``(s+2) x (s+2)`` interpolation matrices for rows of ``xs``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    b, s = xs.shape
    m = np.zeros((b, s + 2, s + 2))
    m[:, :s, :s] = rbf_array(np.abs(xs[:, :, None] - xs[:, None, :]), k)
    m[:, :s, s] = xs
    m[:, :s, s + 1] = 1.0
    m[:, s, :s] = xs
    m[:, s + 1, :s] = 1.0
    return m


def lu_factor_batch(a: np.ndarray):
    """Batched Doolittle LU with partial pivoting.

    Returns ``(lu, perm)`` with unit-lower ``L`` and ``U`` packed into ``lu``
    and the row permutation ``perm`` such that ``a[perm] = L @ U``.
    """
    lu = np.array(a, dtype=np.float64, copy=True)
    b, n, _ = lu.shape
    perm = np.tile(np.arange(n), (b, 1))
    rows = np.arange(b)
    for j in range(n - 1):
        p = j + np.argmax(np.abs(lu[:, j:, j]), axis=1)
        swap = p != j
        if np.any(swap):
            r = rows[swap]
            pj = p[swap]
            lu[r, j], lu[r, pj] = lu[r, pj].copy(), lu[r, j].copy()
            perm[r, j], perm[r, pj] = perm[r, pj].copy(), perm[r, j].copy()
        pivot = lu[:, j, j]
        safe = np.where(pivot == 0.0, 1.0, pivot)
        factors = lu[:, j + 1 :, j] / safe[:, None]
        factors[pivot == 0.0] = 0.0
        lu[:, j + 1 :, j] = factors
        lu[:, j + 1 :, j + 1 :] -= factors[:, :, None] * lu[:, j, None, j + 1 :]
    return lu, perm


def lu_solve_batch(lu: np.ndarray, perm: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve with factors from :func:`lu_factor_batch`; ``rhs`` is ``(B, n, m)``."""
    b, n, _ = lu.shape
    y = np.take_along_axis(rhs, perm[:, :, None], axis=1).astype(np.float64)
    for i in range(1, n):
        y[:, i] -= np.einsum("bj,bjm->bm", lu[:, i, :i], y[:, :i])
    for i in range(n - 1, -1, -1):
        y[:, i] -= np.einsum("bj,bjm->bm", lu[:, i, i + 1 :], y[:, i + 1 :])
        y[:, i] /= lu[:, i, i][:, None]
    return y


def _closest_pair(xs: np.ndarray) -> tuple[int, int]:
    d = np.abs(xs[:, None] - xs[None, :])
    d[np.diag_indices_from(d)] = np.inf
    i, j = np.unravel_index(np.argmin(d), d.shape)
    return int(min(i, j)), int(max(i, j))


def _factor_checked(xs: np.ndarray, k: int):
    m = system_matrix(xs, k)
    n = m.shape[-1]
    lu, perm = lu_factor_batch(m)
    diag = np.abs(np.diagonal(lu, axis1=1, axis2=2))
    eye = np.broadcast_to(np.eye(n), m.shape)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = lu_solve_batch(lu, perm, eye)
        cond = np.abs(m).sum(axis=1).max(axis=1) * np.abs(inv).sum(axis=1).max(axis=1)
    bad = (diag.min(axis=1) == 0.0) | ~np.isfinite(cond) | (cond > COND_MAX)
    if np.any(bad):
        unit = int(np.flatnonzero(bad)[0])
        i, j = _closest_pair(xs[unit])
        raise SingularSystemError(
            f"spline system for unit {unit} is near-singular "
            f"(condition estimate {cond[unit]:.3g} > {COND_MAX:g}); "
            f"closest control points are #{i} (x={xs[unit, i]:.6g}) and "
            f"#{j} (x={xs[unit, j]:.6g})",
            unit=unit,
            pair=(i, j),
        )
    return lu, perm


def solve_coefficients_batch(xs: np.ndarray, ys: np.ndarray, k: int):
    """Solve the interpolation systems for every row.

    ``xs`` must already be separated (see :func:`separate`).  Returns
    ``(w, v)`` with shapes ``(B, s)`` and ``(B, 2)``; ``v[:, 0]`` is the
    slope and ``v[:, 1]`` the offset.
    """
    k = _check_order(k)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    b, s = xs.shape
    lu, perm = _factor_checked(xs, k)
    rhs = np.zeros((b, s + 2, 1))
    rhs[:, :s, 0] = ys
    sol = lu_solve_batch(lu, perm, rhs)[:, :, 0]
    return sol[:, :s], sol[:, s:]


def solve_vjp_batch(xs, k, w, v, adjoint_w, adjoint_v):
    """Pull adjoints of ``(w, v)`` back to adjoints of ``(xs, ys)``.

    One extra solve against the same (symmetric) system gives
    ``lam = M^-1 g``; then ``ys_bar = lam[:s]`` and
    ``xs_bar = -(d M / d xs)^T (lam p^T)`` summed per entry.
    """
    k = _check_order(k)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    b, s = xs.shape
    p = np.concatenate([np.atleast_2d(w), np.atleast_2d(v)], axis=1)
    g = np.concatenate([np.atleast_2d(adjoint_w), np.atleast_2d(adjoint_v)], axis=1)
    lu, perm = _factor_checked(xs, k)
    lam = lu_solve_batch(lu, perm, g[:, :, None])[:, :, 0]
    ys_bar = lam[:, :s]
    grad_m = -lam[:, :, None] * p[:, None, :]
    diff = xs[:, :, None] - xs[:, None, :]
    dk = rbf_derivative_array(np.abs(diff), k) * np.sign(diff)
    gk = grad_m[:, :s, :s]
    xs_bar = ((gk + np.swapaxes(gk, 1, 2)) * dk).sum(axis=2)
    xs_bar += grad_m[:, :s, s] + grad_m[:, s, :s]
    return xs_bar, ys_bar


def evaluate_batch(x, xs, w, v0, v1, k):
    """Evaluate splines at ``x``; parameters broadcast against ``x[..., None]``."""
    r = np.abs(x[..., None] - xs)
    return (w * rbf_array(r, k)).sum(axis=-1) + v0 * x + v1


def _single(cps: ControlPointSet):
    return np.asarray(cps.xs, dtype=np.float64)[None], np.asarray(cps.ys, dtype=np.float64)[None]


def solve_coefficients(cps: ControlPointSet, k: int) -> SplineCoefficients:
    xs, ys = _single(cps)
    w, v = solve_coefficients_batch(xs, ys, k)
    return SplineCoefficients(tuple(w[0].tolist()), float(v[0, 0]), float(v[0, 1]))


def _check_x(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("spline input must be finite")
    return x


def evaluate(x, cps: ControlPointSet, coeffs: SplineCoefficients, k: int):
    """Spline value ``sum_i w_i U_k(|x - x_i|) + v0 x + v1``; accepts arrays."""
    k = _check_order(k)
    x = _check_x(x)
    out = evaluate_batch(
        x, np.asarray(cps.xs), np.asarray(coeffs.w), coeffs.v0, coeffs.v1, k
    )
    return float(out) if out.ndim == 0 else out


def evaluate_derivative_x(x, cps: ControlPointSet, coeffs: SplineCoefficients, k: int):
    k = _check_order(k)
    x = _check_x(x)
    d = x[..., None] - np.asarray(cps.xs)
    out = (np.asarray(coeffs.w) * rbf_derivative_array(np.abs(d), k) * np.sign(d)).sum(
        axis=-1
    ) + coeffs.v0
    return float(out) if out.ndim == 0 else out


def solve_vjp(cps: ControlPointSet, k: int, coeffs: SplineCoefficients, adjoint_w, adjoint_v):
    """Adjoints of the control points given adjoints of the coefficients."""
    xs, _ = _single(cps)
    if len(adjoint_w) != cps.size or len(adjoint_v) != 2:
        raise ValueError("adjoint_w must have length s and adjoint_v length 2")
    xs_bar, ys_bar = solve_vjp_batch(
        xs,
        k,
        np.asarray(coeffs.w)[None],
        np.array([[coeffs.v0, coeffs.v1]]),
        np.asarray(adjoint_w, dtype=np.float64)[None],
        np.asarray(adjoint_v, dtype=np.float64)[None],
    )
    return xs_bar[0], ys_bar[0]


class PolyharmonicSpline(RegressorMixin, BaseEstimator):
    """Interpolating 1-D polyharmonic spline as a scikit-learn regressor.

    Parameters
    ----------
    order : int, default=3
        Polyharmonic order ``k``.
    separation : float, default=1e-4
        Minimum gap enforced between sorted knots before solving.

    Attributes
    ----------
    knots_ : ndarray of shape (s,)
        Sorted, separated control-point abscissae.
    weights_ : ndarray of shape (s,)
    slope_, intercept_ : float
    """

    def __init__(self, order=3, separation=SEPARATION_EPS):
        self.order = order
        self.separation = separation

    def fit(self, X, y):
        x = np.asarray(X, dtype=np.float64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if x.shape != y.shape:
            raise ValueError(f"X and y lengths differ: {x.shape[0]} != {y.shape[0]}")
        ControlPointSet(tuple(x), tuple(y))
        knots, order = separate(x[None], self.separation)
        w, v = solve_coefficients_batch(knots, y[order[0]][None], self.order)
        self.knots_ = knots[0]
        self.weights_ = w[0]
        self.slope_ = float(v[0, 0])
        self.intercept_ = float(v[0, 1])
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        x = _check_x(np.asarray(X, dtype=np.float64).reshape(-1))
        return evaluate_batch(
            x, self.knots_, self.weights_, self.slope_, self.intercept_, self.order
        )

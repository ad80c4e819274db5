import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyneuron import spline
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
from polyneuron.autodiff.optim import Adam
from polyneuron.autodiff.tensor import Tensor
from polyneuron.exceptions import ConfigError, StaleCacheError, UsageError

GRID = np.linspace(-3, 3, 201)


def curve(act, x):
    return act(Tensor(np.asarray(x, dtype=np.float64).reshape(-1, 1))).data.ravel()


def set_r(act, w, xs=(-1.0, 0.0, 1.0), v0=0.0, v1=0.0):
    act.w.data[:] = w
    act.xs.data[:] = xs
    act.v0.data[:] = v0
    act.v1.data[:] = v1


@pytest.mark.parametrize("kind", ["polyneuron", "polyneuron-r"])
def test_relu_like_unit_values(kind):
    act = init_relu_like(kind)
    np.testing.assert_allclose(curve(act, [-1, 0, 1, 0.5]), [0, 0, 1, 0.40625], atol=1e-12)


def test_relu_like_parameters():
    pn = init_relu_like("polyneuron")
    assert pn.xs.data.tolist() == [[-1.0, 0.0, 1.0]] and pn.ys.data.tolist() == [[0.0, 0.0, 1.0]]
    r = init_relu_like("polyneuron-r")
    np.testing.assert_allclose(r.w.data, [[0.125, -0.25, 0.125]], atol=1e-12)
    assert r.v0.data[0] == pytest.approx(0.5) and r.v1.data[0] == pytest.approx(-0.25)


def test_init_equivalence_on_grid():
    a = init_relu_like("polyneuron").unit_curves(GRID)
    b = init_relu_like("polyneuron-r").unit_curves(GRID)
    assert np.max(np.abs(a - b)) <= 1e-6


@pytest.mark.parametrize("s", [4, 5, 7])
def test_wider_relu_like_init(s):
    for kind in ("polyneuron", "polyneuron-r"):
        act = init_relu_like(kind, s=s)
        xs = np.linspace(-1, 1, s)
        np.testing.assert_allclose(curve(act, xs), np.maximum(xs, 0), atol=1e-10)


def test_init_rejects_bad_requests():
    with pytest.raises(UsageError):
        init_relu_like("polyneuron", s=1)
    with pytest.raises(UsageError):
        init_relu_like("swish")


def test_identity_parameters_give_identity():
    act = PolyNeuronR(1, dtype=np.float64)
    set_r(act, 0.0, v0=1.0)
    np.testing.assert_array_equal(curve(act, GRID), GRID)


def test_baselines():
    assert curve(ReLU(), [-2.0]).tolist() == [0.0]
    sw = Swish(1, beta=3.7, dtype=np.float64)
    assert curve(sw, [0.0]).tolist() == [0.0]
    assert curve(sw, [-1e4, 1e4]).tolist() == [0.0, 1e4]
    apl = APL(1, dtype=np.float64)
    apl.a.data[:] = 0
    np.testing.assert_array_equal(curve(apl, GRID), np.maximum(GRID, 0))


def test_apl_hinge_formula():
    apl = APL(1, dtype=np.float64)
    apl.a.data[:] = [[0.2, -0.3]]
    apl.b.data[:] = [[0.5, -1.0]]
    x = np.array([-2.0, 0.0, 1.0])
    expected = np.maximum(x, 0) + 0.2 * np.maximum(0, 0.5 - x) - 0.3 * np.maximum(0, -1.0 - x)
    np.testing.assert_allclose(curve(apl, x), expected)


def test_regularizer_examples():
    cfg = RegularizerConfig(lambda_prod=0.0, lambda_sum=1e-2)
    solved = PolyNeuronR(1, dtype=np.float64)
    assert regularizer_loss([solved], RegularizerConfig(3.0, 5.0)).item() == pytest.approx(0.0, abs=1e-15)
    one = PolyNeuronR(1, dtype=np.float64)
    set_r(one, [0.5, 0.5, -0.5])
    assert regularizer_loss([one], cfg).item() == pytest.approx(0.005, abs=1e-15)
    two = PolyNeuronR(2, dtype=np.float64)
    set_r(two, [0.5, 0.5, -0.5])
    assert regularizer_loss([two], cfg).item() == pytest.approx(0.005, abs=1e-15)
    assert regularizer_loss([one, one], cfg).item() == pytest.approx(0.005, abs=1e-15)
    prod_only = RegularizerConfig(lambda_prod=1.0, lambda_sum=0.0)
    assert regularizer_loss([one], prod_only).item() == pytest.approx(1.0)


def test_regularizer_zero_without_relaxed_units():
    loss = regularizer_loss([ReLU(3), PolyNeuron(2)], RegularizerConfig(1.0, 1.0))
    assert loss.item() == 0.0 and not loss.requires_grad


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.2, 1.0), min_size=2, max_size=6),
    st.lists(st.floats(-2, 2), min_size=7, max_size=7),
    st.sampled_from([1, 2, 3]),
)
def test_regularizer_vanishes_on_solved_coefficients(gaps, ys, k):
    xs = -1.0 + np.concatenate([[0.0], np.cumsum(gaps)])
    s = xs.size
    w, v = spline.solve_coefficients_batch(xs[None], np.array(ys[:s])[None], k)
    act = PolyNeuronR(1, s=s, k=k, dtype=np.float64)
    set_r(act, w[0], xs=xs, v0=v[0, 0], v1=v[0, 1])
    lam = 1.0
    assert regularizer_loss([act], RegularizerConfig(lam, lam)).item() <= lam * 2 * spline.TOL_CONSTRAINT


@pytest.mark.parametrize("kind", ["swish", "apl", "polyneuron", "polyneuron-r"])
def test_per_channel_sharing_commutes_with_spatial_permutation(kind):
    rng = np.random.default_rng(0)
    act = make_activation(ActivationSpec(kind), 3, rng, np.float64)
    for p in act.parameters():
        p.data += rng.normal(scale=0.05, size=p.shape)
    act.refresh()
    x = rng.normal(size=(2, 3, 4, 5))
    perm = rng.permutation(20)
    flat = x.reshape(2, 3, 20)
    a = act(Tensor(flat[:, :, perm].reshape(x.shape))).data
    b = act(Tensor(x)).data.reshape(2, 3, 20)[:, :, perm].reshape(x.shape)
    np.testing.assert_array_equal(a, b)


def test_layer_sharing_uses_one_unit():
    act = make_activation(ActivationSpec("polyneuron", sharing="layer"), 16)
    assert act.units == 1
    assert act(Tensor(np.zeros((2, 16, 3, 3), dtype=np.float32))).shape == (2, 16, 3, 3)


def test_channel_count_is_checked():
    with pytest.raises(UsageError):
        PolyNeuron(4)(Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("kind", ["polyneuron", "polyneuron-r"])
def test_every_parameter_receives_gradient(kind):
    rng = np.random.default_rng(1)
    act = make_activation(ActivationSpec(kind), 2, rng, np.float64)
    for p in act.parameters():
        p.data += rng.normal(scale=0.1, size=p.shape)
    act.refresh()
    x = Tensor(rng.normal(scale=2, size=(8, 2)), requires_grad=True)
    loss = (act(x) * Tensor(rng.normal(size=(8, 2)))).sum()
    loss = loss + regularizer_loss([act], RegularizerConfig(0.1, 0.1)) if kind == "polyneuron-r" else loss
    loss.backward()
    assert np.all(np.abs(x.grad) > 0)
    for p in act.parameters():
        assert p.grad is not None and np.all(np.abs(p.grad) > 0)


@pytest.mark.parametrize("kind", ["swish", "apl", "polyneuron", "polyneuron-r"])
def test_activation_parameters_are_decay_exempt(kind):
    act = make_activation(ActivationSpec(kind), 4)
    opt = Adam(act.parameters(), weight_decay=1e-4)
    decayed, exempt = opt.param_groups
    assert decayed["params"] == [] and len(exempt["params"]) == len(list(act.parameters())) > 0


def test_stale_cache_is_detected():
    act = PolyNeuron(2)
    act.ys.data[0, 1] += 0.1
    with pytest.raises(StaleCacheError):
        act(Tensor(np.zeros((1, 2), dtype=np.float32)))
    act.refresh()
    act(Tensor(np.zeros((1, 2), dtype=np.float32)))


def test_cache_matches_fresh_solve_and_unsorted_points():
    act = PolyNeuron(1, dtype=np.float64)
    act.xs.data[:] = [[0.7, -1.2, 0.1]]
    act.ys.data[:] = [[0.3, -0.4, 0.9]]
    act.refresh()
    knots, w, v = act.coefficients()
    cps = spline.ControlPointSet((-1.2, 0.1, 0.7), (-0.4, 0.9, 0.3))
    co = spline.solve_coefficients(cps, 3)
    np.testing.assert_allclose(w[0], co.w, atol=1e-14)
    np.testing.assert_allclose(curve(act, [0.7, -1.2, 0.1]), [0.3, -0.4, 0.9], atol=1e-12)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ActivationSpec("gelu")
    with pytest.raises(ConfigError):
        ActivationSpec("relu", sharing="neuron")
    with pytest.raises(ConfigError):
        RegularizerConfig(-1.0, 0.0)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ratiolab import numcore as nc
from ratiolab.qnetworks import (
    CategoricalSupport,
    ContractViolation,
    NoisyLayer,
    QNetwork,
    argmax_action,
    categorical_project,
    cross_entropy_loss,
    dueling_combine,
    noisy_forward,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_argmax_ties_lowest_index():
    assert argmax_action([2, 5, 5]) == 1
    assert argmax_action([-1]) == 0


def test_argmax_empty():
    with pytest.raises(ContractViolation):
        argmax_action([])


@given(st.lists(st.integers(-50, 50), min_size=1, max_size=8),
       st.integers(1, 20), st.integers(-100, 100))
def test_argmax_affine_invariance(q, a, b):
    # integer inputs keep a*q + b exact, so ties survive the transform
    q = np.array(q, dtype=float)
    assert argmax_action(a * q + b) == argmax_action(q)


@pytest.mark.parametrize("c", [-4.0, 0.0, 2.5])
def test_dueling_constant_advantage_cancels(c):
    np.testing.assert_allclose(dueling_combine(3.0, [c, c, c]), [3.0, 3.0, 3.0])


def test_dueling_examples():
    np.testing.assert_allclose(dueling_combine(0.0, [1.0, -1.0]), [1.0, -1.0])
    np.testing.assert_allclose(dueling_combine(2.0, [4.0, 0.0]), [4.0, 0.0])


@given(finite, st.lists(finite, min_size=1, max_size=6), finite)
def test_dueling_shift_invariance(v, adv, c):
    adv = np.array(adv)
    np.testing.assert_allclose(dueling_combine(v, adv + c), dueling_combine(v, adv), atol=1e-9)


def _layer(rng, fan_in=3, fan_out=2):
    return NoisyLayer(fan_in, fan_out, rng)


def test_noisy_zero_sigma_matches_dense():
    rng = np.random.default_rng(0)
    layer = _layer(rng)
    layer.sigma_W.value[:] = 0.0
    layer.sigma_b.value[:] = 0.0
    x = np.array([0.3, -1.0, 2.0])
    out = noisy_forward(layer, x, resample=True, rng=rng)
    expected = nc.dense_forward(layer.mu_W, layer.mu_b, nc.Tensor(x)).value
    np.testing.assert_array_equal(out, expected)


def test_noisy_frozen_noise_is_deterministic():
    rng = np.random.default_rng(1)
    layer = _layer(rng)
    layer.resample(rng)
    x = np.array([1.0, 2.0, 3.0])
    a = noisy_forward(layer, x, resample=False)
    b = noisy_forward(layer, x, resample=False)
    np.testing.assert_array_equal(a, b)


def test_noisy_output_variance_closed_form():
    # y_i - E[y_i] = f(e_out_i) * (sum_j sigma_ij x_j f(e_in_j) + sigma_b_i); E[f(u)^2] = E|u| = sqrt(2/pi)
    rng = np.random.default_rng(2)
    layer = NoisyLayer(3, 2, rng)
    layer.sigma_W.value[:] = [[0.5, 0.1, 0.3], [0.2, 0.4, 0.05]]
    layer.sigma_b.value[:] = [0.2, 0.6]
    x = np.array([1.0, -2.0, 0.5])
    c = math.sqrt(2 / math.pi)
    sw, sb = layer.sigma_W.value, layer.sigma_b.value
    expected = c * (c * (sw**2 * x**2).sum(axis=1) + sb**2)
    samples = np.array([noisy_forward(layer, x, True, rng) for _ in range(100_000)])
    np.testing.assert_allclose(samples.var(axis=0), expected, rtol=0.05)


def test_noisy_shape_error():
    layer = _layer(np.random.default_rng(0))
    with pytest.raises(nc.DimensionError):
        noisy_forward(layer, np.zeros(4), resample=False)


def test_project_terminal_at_vmin():
    sup = CategoricalSupport(-1.0, 1.0, 5)
    p = np.full(5, 0.2)
    np.testing.assert_array_equal(categorical_project(p, -1.0, 0.9, True, sup), [1, 0, 0, 0, 0])


def test_project_identity_on_atoms():
    sup = CategoricalSupport(-2.0, 2.0, 5)
    p = np.array([0.1, 0.2, 0.3, 0.15, 0.25])
    np.testing.assert_allclose(categorical_project(p, 0.0, 1.0, False, sup), p, atol=1e-15)


def test_project_two_hot_split():
    # atoms (0, 1, 2); z = 0 shifts to 0.5, halfway between atoms 0 and 1
    sup = CategoricalSupport(0.0, 2.0, 3)
    np.testing.assert_allclose(categorical_project([1.0, 0.0, 0.0], 0.5, 1.0, False, sup), [0.5, 0.5, 0.0])


def test_project_rejects_malformed():
    sup = CategoricalSupport(0.0, 2.0, 3)
    with pytest.raises(ContractViolation):
        categorical_project([0.5, 0.6, 0.0], 0.0, 1.0, False, sup)
    with pytest.raises(ContractViolation):
        categorical_project([1.2, -0.2, 0.0], 0.0, 1.0, False, sup)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 21), st.floats(-15, 15), st.floats(0, 1), st.booleans(), st.integers(0, 2**32 - 1))
def test_project_conserves_mass(n, reward, discount, done, seed):
    sup = CategoricalSupport(-10.0, 10.0, n)
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    out = categorical_project(p, reward, discount, done, sup)
    assert abs(out.sum() - 1.0) < 1e-9
    assert np.all(out >= 0)


@settings(max_examples=300, deadline=None)
@given(st.integers(2, 21), st.floats(-1, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_project_preserves_mean_without_clipping(n, reward, discount, seed):
    # support [-10, 10], inputs on [-5, 5]: |r + g z| <= 6, never clipped
    sup = CategoricalSupport(-10.0, 10.0, n)
    p = np.random.default_rng(seed).dirichlet(np.ones(n))
    inner = np.abs(sup.atoms) <= 5.0
    if not inner.any():
        return
    p = np.where(inner, p, 0.0)
    p /= p.sum()
    out = categorical_project(p, reward, discount, False, sup)
    assert out @ sup.atoms == pytest.approx(reward + discount * (p @ sup.atoms), abs=1e-9)


def test_cross_entropy_examples():
    t = np.array([0.2, 0.3, 0.5])
    assert cross_entropy_loss(t, np.log(t)) == pytest.approx(-(t * np.log(t)).sum())
    lp = np.log([0.1, 0.7, 0.2])
    assert cross_entropy_loss([0, 1, 0], lp) == pytest.approx(-lp[1])
    assert cross_entropy_loss(np.full(4, 0.25), np.log(np.full(4, 0.25))) == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_length_mismatch():
    with pytest.raises(nc.DimensionError):
        cross_entropy_loss([0.5, 0.5], [0.0])


@pytest.mark.parametrize("head", ["scalar", "dueling", "categorical", "dueling-categorical"])
@pytest.mark.parametrize("noisy", [False, True])
def test_network_output_shapes(head, noisy):
    sup = CategoricalSupport(-1, 1, 7)
    net = QNetwork(6, 3, hidden=(8,), head=head, noisy=noisy, support=sup, rng=np.random.default_rng(0))
    out = net.forward(np.zeros((4, 6))).value
    if head.endswith("categorical"):
        assert out.shape == (4, 3, 7)
        np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)
        q = net.q_values(np.zeros((4, 6)))
        assert q.shape == (4, 3) and np.all((q >= -1) & (q <= 1))
    else:
        assert out.shape == (4, 3)


@pytest.mark.parametrize("head", ["scalar", "dueling", "categorical", "dueling-categorical"])
def test_network_gradcheck(head):
    from oracles import central_differences, max_relative_error

    rng = np.random.default_rng(11)
    net = QNetwork(3, 2, hidden=(4,), head=head, noisy=True, support=CategoricalSupport(-1, 1, 3), rng=rng)
    net.resample_noise(rng)
    obs = rng.normal(size=(2, 3))
    w = rng.normal(size=net.forward(obs).shape)

    def loss():
        return nc.reduce_sum(nc.mul(net.forward(obs), w))

    params = net.parameters()
    nc.backward(loss())
    numeric = central_differences(lambda: float(loss().value), [p.value for p in params])
    assert max_relative_error([p.grad for p in params], numeric) < 1e-4


def test_noiseless_forward_is_deterministic():
    net = QNetwork(4, 2, hidden=(5,), rng=np.random.default_rng(3))
    x = np.ones(4)
    assert net.forward(x).value.tobytes() == net.forward(x).value.tobytes()

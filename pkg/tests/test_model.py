import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlab.core.model import (
    ShapeMismatchError,
    Weights,
    forward,
    forward_batch,
    grad_sample,
    init_weights,
    load_weights,
    logistic_loss,
    logistic_loss_prime,
    logistic_loss_second,
    patch_outputs,
    phi,
    phi_prime,
    save_weights,
)
from patchlab.models.configs import ActivationParams, InitConfig
from tests.factories import random_weights
from tests.oracles import finite_difference_grad, relative_error

activations = st.builds(
    ActivationParams,
    beta=st.floats(min_value=0.0, max_value=1.0),
    r=st.floats(min_value=0.01, max_value=10.0),
)
reals = st.floats(min_value=-50.0, max_value=50.0, allow_nan=False)


# =============================================================================
# Activation
# =============================================================================


@given(act=activations, z=reals)
@settings(max_examples=200, deadline=None)
def test_phi_prime_is_bounded_by_beta_and_one(act, z):
    slope = phi_prime(z, act)
    assert act.beta - 1e-12 <= slope <= 1.0 + 1e-12


@given(act=activations)
@settings(max_examples=100, deadline=None)
def test_phi_is_continuous_at_the_joins(act):
    eps = 1e-9
    assert phi(0.0, act) == 0.0
    assert abs(phi(-eps, act) - phi(eps, act)) < 1e-8
    assert abs(phi(act.r - eps, act) - phi(act.r + eps, act)) < 1e-8
    assert phi(act.r, act) == pytest.approx((1 + act.beta) * act.r / 2)


@given(act=activations, z=reals)
@settings(max_examples=200, deadline=None)
def test_phi_prime_matches_central_difference(act, z):
    h = 1e-6
    numeric = (phi(z + h, act) - phi(z - h, act)) / (2 * h)
    assert numeric == pytest.approx(phi_prime(z, act), abs=1e-7 + (1 - act.beta) * h / act.r)


def test_phi_branches():
    act = ActivationParams(beta=0.1, r=1.0)
    assert phi(-2.0, act) == pytest.approx(-0.2)
    assert phi(0.5, act) == pytest.approx(0.45 * 0.25 + 0.05)
    assert phi(3.0, act) == pytest.approx(3.0 - 0.45)
    np.testing.assert_allclose(phi(np.array([-2.0, 3.0]), act), [-0.2, 2.55])


# =============================================================================
# Logistic loss
# =============================================================================


def test_logistic_loss_is_stable_at_extremes():
    assert logistic_loss(0.0) == pytest.approx(math.log(2))
    assert logistic_loss(1000.0) == pytest.approx(0.0, abs=1e-300)
    assert logistic_loss(-1000.0) == pytest.approx(1000.0)
    assert math.isfinite(logistic_loss(-1e308))
    assert logistic_loss_prime(0.0) == pytest.approx(-0.5)
    assert logistic_loss_prime(-1000.0) == pytest.approx(-1.0)
    assert logistic_loss_second(0.0) == pytest.approx(0.25)


@given(z=reals)
@settings(max_examples=200, deadline=None)
def test_logistic_identities(z):
    assert logistic_loss_prime(z) + logistic_loss_prime(-z) == pytest.approx(-1.0)
    assert logistic_loss(z) - logistic_loss(-z) == pytest.approx(-z, abs=1e-9)
    h = 1e-6
    numeric = (logistic_loss_prime(z + h) - logistic_loss_prime(z - h)) / (2 * h)
    assert numeric == pytest.approx(logistic_loss_second(z), abs=1e-6)


# =============================================================================
# Network
# =============================================================================


def test_forward_matches_hand_sum():
    W = random_weights(d=6, seed=0)
    X = np.random.default_rng(1).normal(size=(3, 6))
    X[0] = 2.0 * W.w[0, 0] / np.linalg.norm(W.w[0, 0])
    expected = sum(phi(W.w[0, 0] @ x, W.act) - phi(W.w[1, 0] @ x, W.act) for x in X)
    assert forward(W, X) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_forward_averages_neurons():
    W = random_weights(d=5, seed=2, m=4)
    X = np.random.default_rng(3).normal(size=(2, 5))
    expected = sum(
        np.mean([phi(W.w[0, r] @ x, W.act) for r in range(4)])
        - np.mean([phi(W.w[1, r] @ x, W.act) for r in range(4)])
        for x in X
    )
    assert forward(W, X) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_zero_weights_give_zero_output():
    W = Weights.zeros(7, ActivationParams(), m=2)
    X = np.random.default_rng(0).normal(size=(4, 3, 7))
    assert not forward_batch(W, X).any()
    assert not patch_outputs(W, X).any()


def test_patch_outputs_sum_to_forward():
    W = random_weights(d=9, seed=4, m=3)
    X = np.random.default_rng(5).normal(size=(6, 3, 9))
    np.testing.assert_allclose(patch_outputs(W, X).sum(axis=1), forward_batch(W, X))


@given(order=st.permutations(range(4)), seed=st.integers(min_value=0, max_value=2**16))
@settings(max_examples=50, deadline=None)
def test_forward_ignores_patch_order(order, seed):
    W = random_weights(d=6, seed=seed, m=2)
    X = np.random.default_rng(seed + 1).normal(size=(4, 6))
    assert forward(W, X[list(order)]) == pytest.approx(forward(W, X), rel=1e-12, abs=1e-12)


@given(seed=st.integers(min_value=0, max_value=2**16))
@settings(max_examples=50, deadline=None)
def test_swapping_output_filters_negates_the_output(seed):
    W = random_weights(d=6, seed=seed, m=3)
    X = np.random.default_rng(seed + 1).normal(size=(3, 6))
    swapped = Weights(w=W.w[::-1].copy(), act=W.act)
    assert forward(swapped, X) == pytest.approx(-forward(W, X), rel=1e-12, abs=1e-12)


def test_forward_rejects_mismatched_dimension():
    W = random_weights(d=5, seed=0)
    with pytest.raises(ShapeMismatchError):
        forward(W, np.zeros((3, 6)))
    with pytest.raises(ShapeMismatchError):
        forward(W, np.zeros(5))


def test_weights_reject_bad_shape():
    with pytest.raises(ShapeMismatchError):
        Weights(w=np.zeros((3, 1, 4)), act=ActivationParams())


@pytest.mark.parametrize("y", [1, -1])
def test_gradient_at_zero_has_closed_form(y):
    act = ActivationParams(beta=0.2, r=1.0)
    W = Weights.zeros(8, act)
    X = np.random.default_rng(6).normal(size=(3, 8))
    grad = grad_sample(W, X, y)
    expected = y * logistic_loss_prime(0.0) * act.beta * X.sum(axis=0)
    np.testing.assert_allclose(grad[0, 0], expected, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(grad[1, 0], -expected, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_grad_sample_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    W = random_weights(d=20, seed=seed, m=2)
    X = rng.normal(size=(3, 20))
    y = 1 if seed % 2 else -1
    analytic = grad_sample(W, X, y)
    numeric = finite_difference_grad(lambda V: float(logistic_loss(y * forward(V, X))), W)
    assert relative_error(analytic, numeric) <= 1e-6


# =============================================================================
# Initialization and weight files
# =============================================================================


def test_init_weights_is_deterministic_and_snapshotted():
    config = InitConfig(sigma_0=0.01, seed=3)
    a = init_weights(4000, 2, config)
    b = init_weights(4000, 2, config)
    np.testing.assert_array_equal(a.w, b.w)
    np.testing.assert_array_equal(a.init, a.w)
    assert not a.init.flags.writeable
    assert a.w.std() == pytest.approx(0.01, rel=0.05)


def test_init_inner_products_stay_within_sigma_log_d():
    d, sigma_0 = 4000, 0.01
    W = init_weights(d, 2, InitConfig(sigma_0=sigma_0, seed=11))
    rng = np.random.default_rng(12)
    directions = rng.normal(size=(50, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    directions = np.vstack([np.eye(d)[:10], directions])
    inner = np.abs(W.w.reshape(-1, d) @ directions.T)
    assert inner.max() <= sigma_0 * math.log(d)
    assert 0.9 * sigma_0**2 <= W.w.var() <= 1.1 * sigma_0**2
    assert abs(W.w.mean()) <= 5 * sigma_0 / math.sqrt(W.w.size)


def test_weights_file_preserves_values(tmp_path):
    W = init_weights(12, 3, InitConfig(sigma_0=0.5, seed=9), ActivationParams(beta=0.3, r=0.7))
    W = W.replace(W.w + 1.0)
    loaded = load_weights(save_weights(W, tmp_path / "w.bin"))
    np.testing.assert_array_equal(loaded.w, W.w)
    np.testing.assert_array_equal(loaded.init, W.init)
    assert loaded.act == W.act
    assert loaded.seed == 9


def test_weights_file_rejects_bad_magic(tmp_path):
    path = tmp_path / "w.bin"
    path.write_bytes(b"XXXX" + bytes(64))
    with pytest.raises(ShapeMismatchError):
        load_weights(path)

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchlab.core.decompose import project_coefficients
from patchlab.core.model import Weights, init_weights
from patchlab.core.subsets import cutmix_subsets, cutout_sets, expect_over_cardinality
from patchlab.core.synthdata import generate_dataset
from patchlab.core.train import (
    EmptyDatasetError,
    InvalidCutoutSizeError,
    TraceLog,
    TrainingDivergedError,
    cutmix_from_patch_outputs,
    cutmix_objective,
    cutout_loss_and_grad,
    cutout_objective,
    erm_loss_and_grad,
    erm_objective,
    run_training,
    trace_columns,
)
from patchlab.models.configs import ActivationParams, InitConfig, TrainConfig
from patchlab.models.enums import StopReason, TrainingMethod
from tests.factories import make_data_config, random_weights
from tests.oracles import (
    brute_force_cutmix_grad,
    brute_force_cutmix_loss,
    brute_force_cutout_loss,
    finite_difference_grad,
    relative_error,
)


def _objective_loss(method: TrainingMethod, dataset):
    if method == TrainingMethod.ERM:
        return lambda V: erm_objective(V, dataset).loss
    if method == TrainingMethod.CUTOUT:
        return lambda V: cutout_objective(V, dataset, 1).loss
    return lambda V: cutmix_objective(V, dataset).loss


def _objective_grad(method: TrainingMethod, W, dataset):
    if method == TrainingMethod.ERM:
        return erm_objective(W, dataset).grad
    if method == TrainingMethod.CUTOUT:
        return cutout_objective(W, dataset, 1).grad
    return cutmix_objective(W, dataset).grad


# =============================================================================
# Augmentation laws
# =============================================================================


@pytest.mark.parametrize("P", range(1, 7))
def test_cutmix_subset_weights_form_a_distribution(P):
    masks, weights = cutmix_subsets(P)
    assert masks.shape == (2**P, P)
    assert math.fsum(weights) == pytest.approx(1.0, abs=1e-14)
    assert expect_over_cardinality(P, lambda s: s / P) == pytest.approx(0.5)


@pytest.mark.parametrize("P", [2, 3, 5, 8])
def test_expected_mixed_weight_on_a_patch(P):
    masks, weights = cutmix_subsets(P)
    lam = masks.sum(axis=1) / P
    for p in range(P):
        value = math.fsum(weights * (1 - lam) * masks[:, p])
        assert value == pytest.approx((P - 1) / (6 * P), abs=1e-14)


def test_cutout_sets_enumerate_combinations():
    sets = cutout_sets(5, 2)
    assert sets.shape == (10, 5)
    assert (sets.sum(axis=1) == 2).all()
    assert len({tuple(row) for row in sets}) == 10


# =============================================================================
# Objectives against definitions
# =============================================================================


@pytest.mark.parametrize("method", list(TrainingMethod))
@pytest.mark.parametrize("seed", range(8))
def test_objective_gradient_matches_finite_differences(method, seed):
    dataset = generate_dataset(make_data_config(seed=seed))
    W = random_weights(d=dataset.d, seed=1000 + seed)
    numeric = finite_difference_grad(_objective_loss(method, dataset), W)
    assert relative_error(_objective_grad(method, W, dataset), numeric) <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_cutout_loss_matches_brute_force(seed):
    dataset = generate_dataset(make_data_config(seed=seed, P=5))
    W = random_weights(d=dataset.d, seed=seed, m=2)
    for C in (1, 2):
        loss, _ = cutout_loss_and_grad(W, dataset, C)
        assert loss == pytest.approx(brute_force_cutout_loss(W, dataset, C), rel=1e-12)


def test_cutmix_loss_matches_brute_force_on_two_samples():
    dataset = generate_dataset(make_data_config(d=6, n=2, P=2, K=1, seed=4))
    W = random_weights(d=6, seed=8)
    value = cutmix_objective(W, dataset)
    assert value.loss == pytest.approx(brute_force_cutmix_loss(W, dataset), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_cutmix_loss_matches_brute_force(seed):
    dataset = generate_dataset(make_data_config(d=8, n=4, P=3, K=1, seed=seed))
    W = random_weights(d=8, seed=50 + seed, m=2)
    value = cutmix_objective(W, dataset)
    assert value.loss == pytest.approx(brute_force_cutmix_loss(W, dataset), rel=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_cutmix_gradient_matches_brute_force(seed):
    dataset = generate_dataset(make_data_config(d=8, n=4, P=3, K=1, seed=seed))
    W = random_weights(d=8, seed=70 + seed, m=2)
    expected = brute_force_cutmix_grad(W, dataset)
    assert relative_error(cutmix_objective(W, dataset).grad, expected) <= 1e-10


PERMUTED_DATASET = generate_dataset(make_data_config(d=12, n=6, P=5, seed=9))
PERMUTED_WEIGHTS = random_weights(d=12, seed=10, m=2)


@given(order=st.permutations(range(5)), C=st.sampled_from([1, 2]))
@settings(max_examples=30, deadline=None)
def test_cutout_loss_ignores_patch_order(order, C):
    shuffled = dataclasses.replace(PERMUTED_DATASET, X=PERMUTED_DATASET.X[:, list(order)])
    a = cutout_objective(PERMUTED_WEIGHTS, PERMUTED_DATASET, C).loss
    b = cutout_objective(PERMUTED_WEIGHTS, shuffled, C).loss
    assert b == pytest.approx(a, rel=1e-12)


def test_cutmix_threads_agree(tiny_dataset):
    W = random_weights(d=tiny_dataset.d, seed=3, m=2)
    single = cutmix_objective(W, tiny_dataset, threads=1)
    for threads in (2, 3, 16):
        split = cutmix_objective(W, tiny_dataset, threads=threads)
        assert split.loss == pytest.approx(single.loss, rel=1e-12)
        np.testing.assert_allclose(split.grad, single.grad, rtol=1e-10, atol=1e-14)


def test_cutmix_of_one_sample_is_its_erm_loss(tiny_dataset):
    one = tiny_dataset.subset([0])
    W = random_weights(d=one.d, seed=2)
    assert cutmix_objective(W, one).loss == pytest.approx(erm_objective(W, one).loss, rel=1e-12)


def test_empty_cut_reduces_to_erm(tiny_dataset):
    W = random_weights(d=tiny_dataset.d, seed=6)
    loss, grad = cutout_loss_and_grad(W, tiny_dataset, 0, allow_empty_cut=True)
    erm_loss, erm_grad = erm_loss_and_grad(W, tiny_dataset)
    assert loss == pytest.approx(erm_loss, rel=1e-14)
    np.testing.assert_allclose(grad, erm_grad, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("C", [0, 2, 3])
def test_cutout_size_is_validated(tiny_dataset, C):
    W = random_weights(d=tiny_dataset.d, seed=0)
    with pytest.raises(InvalidCutoutSizeError):
        cutout_objective(W, tiny_dataset, C)


def test_objectives_reject_empty_dataset(tiny_dataset):
    empty = tiny_dataset.subset([])
    W = random_weights(d=tiny_dataset.d, seed=0)
    with pytest.raises(EmptyDatasetError):
        erm_objective(W, empty)
    with pytest.raises(EmptyDatasetError):
        cutmix_objective(W, empty)
    with pytest.raises(EmptyDatasetError):
        cutmix_from_patch_outputs(np.zeros((0, 3)), np.zeros(0, dtype=int))


# =============================================================================
# Gradient descent
# =============================================================================


def _init(dataset, m=1):
    return init_weights(dataset.d, m, InitConfig(sigma_0=0.01, seed=1))


def test_run_training_logs_on_schedule(tiny_dataset):
    config = TrainConfig(method=TrainingMethod.ERM, eta=1.0, T=20, log_every=5)
    result = run_training(_init(tiny_dataset), tiny_dataset, config)
    assert result.stop_reason == StopReason.BUDGET
    assert result.t_stop == 20
    assert result.trace.columns == trace_columns(tiny_dataset.bank.K)
    assert list(result.trace.steps) == [0, 5, 10, 15, 20]
    losses = result.trace.column("loss")
    assert losses[-1] < losses[0]
    assert math.isnan(result.trace.column("acc_aug")[0])


def test_run_training_logs_final_step_off_stride(tiny_dataset):
    config = TrainConfig(method=TrainingMethod.CUTOUT, eta=1.0, T=7, log_every=3, C=1)
    result = run_training(_init(tiny_dataset), tiny_dataset, config)
    assert list(result.trace.steps) == [0, 3, 6, 7]
    assert np.isfinite(result.trace.column("acc_aug")).all()


def test_run_training_stops_at_gradient_tolerance(tiny_dataset):
    config = TrainConfig(method=TrainingMethod.CUTMIX, eta=1.0, T=50, grad_tol=1e6)
    W0 = _init(tiny_dataset)
    result = run_training(W0, tiny_dataset, config)
    assert result.stop_reason == StopReason.GRAD_TOL
    assert result.t_stop == 0
    assert len(result.trace) == 1
    np.testing.assert_array_equal(result.weights.w, W0.w)


def test_run_training_does_not_mutate_initial_weights(tiny_dataset):
    W0 = _init(tiny_dataset)
    before = W0.w.copy()
    run_training(W0, tiny_dataset, TrainConfig(method=TrainingMethod.ERM, T=5))
    np.testing.assert_array_equal(W0.w, before)


@pytest.mark.parametrize("method", list(TrainingMethod))
def test_zero_step_size_leaves_weights_unchanged(tiny_dataset, method):
    W0 = _init(tiny_dataset)
    config = TrainConfig(method=method, eta=0.0, T=4, log_every=1)
    result = run_training(W0, tiny_dataset, config)
    assert result.t_stop == 4
    np.testing.assert_array_equal(result.weights.w, W0.w)
    losses = result.trace.column("loss")
    assert (losses == losses[0]).all()


def test_one_erm_step_from_zero_moves_filters_along_their_features(tiny_dataset):
    act = ActivationParams(beta=0.1, r=1.0)
    eta = 0.5
    config = TrainConfig(method=TrainingMethod.ERM, eta=eta, T=1, log_every=1)
    W1 = run_training(Weights.zeros(tiny_dataset.d, act), tiny_dataset, config).weights
    y = tiny_dataset.y
    alpha = tiny_dataset.config.alpha
    step = eta * act.beta / (2 * tiny_dataset.n)
    for s in (1, -1):
        feature_noise = alpha * float(np.sum(y[tiny_dataset.fn_sign == s]))
        for k in range(tiny_dataset.bank.K):
            v = tiny_dataset.bank.vector(s, k)
            count = int(np.sum((y == s) & (tiny_dataset.k == k)))
            expected = step * (s * count + (feature_noise if k == 0 else 0.0))
            assert W1.w[0, 0] @ v == pytest.approx(expected, abs=1e-12)
            assert W1.w[1, 0] @ v == pytest.approx(-expected, abs=1e-12)
            if count:
                assert np.sign(W1.w[0, 0] @ v) == s
                assert np.sign(W1.w[1, 0] @ v) == -s


def test_divergence_reports_last_good_weights(tiny_dataset):
    W0 = _init(tiny_dataset)
    config = TrainConfig(method=TrainingMethod.ERM, eta=float("inf"), T=10)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as excinfo:
        run_training(W0, tiny_dataset, config)
    assert excinfo.value.step == 1
    assert excinfo.value.code == "TRAINING_DIVERGED"
    np.testing.assert_array_equal(excinfo.value.last_good.w, W0.w)


@pytest.mark.parametrize("method", [TrainingMethod.ERM, TrainingMethod.CUTOUT])
def test_erm_and_cutout_coefficients_never_decrease(tiny_dataset, method):
    config = TrainConfig(method=method, eta=1.0, T=40, log_every=10, C=1)
    result = run_training(_init(tiny_dataset), tiny_dataset, config)
    recorder = result.recorder
    assert recorder.is_monotone
    assert recorder.min_gamma_increment >= 0.0
    assert recorder.min_rho_increment >= 0.0
    gammas = [table.gamma for table in recorder.history]
    for earlier, later in zip(gammas, gammas[1:], strict=False):
        assert (later >= earlier).all()


@pytest.mark.parametrize("method", list(TrainingMethod))
@pytest.mark.parametrize("m", [1, 2])
def test_recorded_coefficients_match_projection(method, m):
    dataset = generate_dataset(make_data_config(d=64, n=10, P=3, seed=5))
    W0 = _init(dataset, m)
    config = TrainConfig(method=method, eta=1.0, T=30, log_every=10, C=1)
    result = run_training(W0, dataset, config)
    projected = project_coefficients(result.weights, W0, dataset)
    assert result.recorder.table.max_relative_gap(projected) <= 1e-8
    assert projected.residual_norm <= 1e-10


def test_coefficient_tracking_can_be_disabled(tiny_dataset):
    config = TrainConfig(method=TrainingMethod.ERM, T=3, track_coefficients=False)
    result = run_training(_init(tiny_dataset), tiny_dataset, config)
    assert result.recorder is None
    assert math.isnan(result.trace.column("gamma_max_common")[0])


def test_trace_csv_preserves_rows(tiny_dataset, tmp_path):
    config = TrainConfig(method=TrainingMethod.ERM, T=4, log_every=2)
    trace = run_training(_init(tiny_dataset), tiny_dataset, config).trace
    path = trace.write_csv(tmp_path / "trace.csv")
    assert path.read_text().splitlines()[0] == ",".join(trace_columns(tiny_dataset.bank.K))
    loaded = TraceLog.read_csv(path)
    np.testing.assert_array_equal(loaded.steps, trace.steps)
    np.testing.assert_array_equal(loaded.column("loss"), trace.column("loss"))


def test_trace_rejects_non_increasing_steps():
    trace = TraceLog(columns=["t", "loss"])
    trace.append({"t": 3, "loss": 1.0})
    with pytest.raises(ValueError, match="increase"):
        trace.append({"t": 3, "loss": 0.5})

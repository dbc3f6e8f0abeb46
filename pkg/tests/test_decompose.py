import dataclasses

import numpy as np
import pytest

from patchlab.core.decompose import (
    CoefficientProjector,
    CoeffTable,
    DecompositionError,
    ProjectionRecorder,
    approx_error_audit,
    check_e_init,
    check_fresh_noise,
    iter_coefficient_rows,
    project_coefficients,
    reconstruct_delta,
)
from patchlab.core.model import init_weights
from patchlab.core.synthdata import generate_dataset, make_rng
from patchlab.core.train import run_training
from patchlab.models.configs import InitConfig, TrainConfig
from patchlab.models.enums import ClauseStatus, TrainingMethod
from tests.factories import make_data_config

EINIT_CLAUSES = [
    "class_balance",
    "feature_counts",
    "feature_patch_coverage",
    "init_feature",
    "init_dominant_noise",
    "init_background_noise",
    "dominant_norm",
    "dominant_inner",
    "dominant_background_inner",
    "background_norm",
    "background_inner",
    "linear_independence",
]


@pytest.fixture(scope="module")
def trained():
    dataset = generate_dataset(make_data_config(d=64, n=10, P=3, seed=2))
    W0 = init_weights(dataset.d, 1, InitConfig(sigma_0=0.01, seed=1))
    config = TrainConfig(method=TrainingMethod.ERM, eta=1.0, T=50, log_every=25)
    result = run_training(W0, dataset, config)
    return dataset, W0, result


# =============================================================================
# Projection
# =============================================================================


def test_projection_reconstructs_weight_change(trained):
    dataset, W0, result = trained
    table = project_coefficients(result.weights, W0, dataset)
    delta = result.weights.w - W0.w
    np.testing.assert_allclose(reconstruct_delta(table, dataset), delta, atol=1e-8)


def test_recorded_table_reconstructs_weight_change(trained):
    dataset, W0, result = trained
    delta = result.weights.w - W0.w
    np.testing.assert_allclose(reconstruct_delta(result.recorder.table, dataset), delta, atol=1e-8)


def test_rho_is_zero_on_feature_patches(trained):
    dataset, W0, result = trained
    table = project_coefficients(result.weights, W0, dataset)
    assert not table.rho[:, :, ~dataset.noise_mask].any()


def test_solvers_agree(trained):
    dataset, W0, result = trained
    projector = CoefficientProjector(dataset)
    qr = projector.project(result.weights, W0.w, solver="qr")
    normal = projector.project(result.weights, W0.w, solver="normal")
    assert qr.max_relative_gap(normal) <= 1e-8
    with pytest.raises(ValueError, match="unknown solver"):
        projector.project(result.weights, W0.w, solver="lu")


def test_projection_recorder_follows_logged_steps(trained):
    dataset, W0, _ = trained
    recorder = ProjectionRecorder(CoefficientProjector(dataset), W0.w)
    config = TrainConfig(method=TrainingMethod.CUTMIX, eta=1.0, T=10, log_every=5)
    result = run_training(W0, dataset, config, hooks=[recorder])
    assert [t.step for t in recorder.history] == [0, 5, 10]
    assert not recorder.history[0].gamma.any()
    assert recorder.history[-1].max_relative_gap(result.recorder.table) <= 1e-8


def test_duplicated_noise_column_is_reported(tiny_dataset):
    noise = tiny_dataset.noise.copy()
    X = tiny_dataset.X.copy()
    p = int(np.flatnonzero(tiny_dataset.noise_mask[0])[0])
    q = int(np.flatnonzero(tiny_dataset.noise_mask[1])[0])
    noise[1, q] = noise[0, p]
    X[1, q] = X[0, p]
    broken = dataclasses.replace(tiny_dataset, X=X, noise=noise)
    with pytest.raises(DecompositionError) as excinfo:
        CoefficientProjector(broken)
    columns = excinfo.value.details["columns"]
    assert f"xi[i=0,p={p}]" in columns
    assert f"xi[i=1,p={q}]" in columns
    assert excinfo.value.code == "SINGULAR_BASIS"


def test_coefficient_accessors_use_sign_order():
    table = CoeffTable.zeros(m=2, K=3, n=4, P=3)
    table.gamma[1, 1, 0, 2] = 3.0
    table.rho[0, 0, 2, 1] = -1.5
    assert table.gamma_of(-1, 1, 2, neuron=1) == 3.0
    assert table.rho_of(1, 2, 1) == -1.5
    model = table.to_model("projection")
    assert (model.m, model.K, model.n, model.P) == (2, 3, 4, 3)
    assert model.gamma[1][1][0][2] == 3.0


def test_coefficient_rows_cover_every_coefficient(trained):
    dataset, W0, result = trained
    rows = list(iter_coefficient_rows(result.recorder.table, dataset))
    K, n, P = dataset.bank.K, dataset.n, dataset.P
    assert len(rows) == 2 * (2 * K + n * (P - 1))
    gamma_rows = [r for r in rows if r[0] == "gamma"]
    assert {r[4] for r in gamma_rows} == set(range(1, K + 1))
    rho_rows = [r for r in rows if r[0] == "rho"]
    assert all(dataset.noise_mask[r[3], r[4]] for r in rho_rows)


# =============================================================================
# Initialization event
# =============================================================================


def test_e_init_reports_every_clause(tiny_dataset):
    W0 = init_weights(tiny_dataset.d, 1, InitConfig())
    report = check_e_init(tiny_dataset, W0)
    assert [c.name for c in report.clauses] == EINIT_CLAUSES
    assert report.success == (not report.failed)
    assert report.d == tiny_dataset.d and report.n == tiny_dataset.n

    with_fresh = check_e_init(tiny_dataset, W0, fresh_draws=5, rng=make_rng(3))
    assert [c.name for c in with_fresh.clauses] == EINIT_CLAUSES + ["fresh_noise_inner"]


def test_class_balance_fails_on_one_class(tiny_dataset):
    one_class = tiny_dataset.subset(tiny_dataset.V(int(tiny_dataset.y[0])))
    W0 = init_weights(one_class.d, 1, InitConfig())
    report = check_e_init(one_class, W0)
    clause = report.clause("class_balance")
    assert clause.status == ClauseStatus.FAIL
    assert clause.margin < 0
    assert not report.success
    assert "class_balance" in report.message


def test_high_dimensional_clauses_hold():
    dataset = generate_dataset(make_data_config(d=2000, n=40, P=3, K=3, seed=0))
    W0 = init_weights(dataset.d, 1, InitConfig(sigma_0=0.01, seed=1))
    report = check_e_init(dataset, W0)
    for name in (
        "init_feature",
        "init_dominant_noise",
        "init_background_noise",
        "dominant_norm",
        "dominant_inner",
        "dominant_background_inner",
        "background_norm",
        "background_inner",
        "linear_independence",
    ):
        assert report.clause(name).status == ClauseStatus.PASS, name
    fresh = check_fresh_noise(dataset, 50, make_rng(9))
    assert fresh.name == "fresh_noise_inner"
    assert fresh.status == ClauseStatus.PASS
    assert fresh.measured <= 1.0


# =============================================================================
# Approximation gaps
# =============================================================================


def test_audit_at_initialization_measures_raw_inner_products(tiny_dataset):
    W0 = init_weights(tiny_dataset.d, 1, InitConfig(sigma_0=0.01, seed=4))
    bank = tiny_dataset.bank
    table = CoeffTable.zeros(1, bank.K, tiny_dataset.n, tiny_dataset.P)
    report = approx_error_audit(W0, table, tiny_dataset)
    own = max(
        abs(float(W0.w[si, 0] @ bank.vector(s, k)))
        for si, s in enumerate((1, -1))
        for k in range(bank.K)
    )
    assert report.feature_gap_own == pytest.approx(own)
    assert report.success
    assert report.max_feature_gap <= report.threshold


def test_audit_flags_gaps_above_threshold(tiny_dataset):
    W0 = init_weights(tiny_dataset.d, 1, InitConfig(sigma_0=0.01, seed=4))
    table = CoeffTable.zeros(1, tiny_dataset.bank.K, tiny_dataset.n, tiny_dataset.P)
    table.gamma[0, 0, 0, 0] = 1.0
    report = approx_error_audit(W0, table, tiny_dataset)
    assert report.feature_gap_own > 0.9
    assert not report.success


def test_noise_gaps_shrink_as_dimension_grows():
    ratios = []
    for d in (500, 2000, 8000):
        dataset = generate_dataset(make_data_config(d=d, n=10, P=3, seed=5))
        W0 = init_weights(d, 1, InitConfig(sigma_0=1e-8, seed=1))
        config = TrainConfig(method=TrainingMethod.ERM, eta=0.1, T=5, log_every=5)
        result = run_training(W0, dataset, config)
        table = result.recorder.table
        report = approx_error_audit(result.weights, table, dataset)
        ratios.append(report.noise_gap_own / float(np.abs(table.rho).max()))
    assert ratios[0] > ratios[1] > ratios[2]
    assert ratios[2] < ratios[0] / 2

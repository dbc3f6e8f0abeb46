"""
Full-batch gradient descent on the ERM, Cutout and CutMix objectives.

Every objective is evaluated the same way: per-patch contributions z_i^(p) first,
then the loss and G[i, p] = dL/dz_i^(p) from the exact augmentation expectation,
then one Jacobian-transpose pass (model.patch_backprop) to the filters.
"""

import csv
import logging
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from patchlab.core.decompose import CoefficientRecorder
from patchlab.core.evaluation import accuracy_on, feature_output_trace
from patchlab.core.model import (
    Weights,
    logistic_loss,
    logistic_loss_prime,
    patch_backprop,
    patch_outputs,
    preactivations,
)
from patchlab.core.subsets import cutmix_subsets, cutout_sets
from patchlab.core.synthdata import Dataset
from patchlab.errors import PatchLabError
from patchlab.models.configs import TrainConfig
from patchlab.models.enums import FeatureTier, StopReason, TrainingMethod

logger = logging.getLogger(__name__)


class InvalidCutoutSizeError(PatchLabError):
    """Raised when the cutout size violates 1 <= C < P/2."""

    def __init__(self, message: str, code: str = "INVALID_CUTOUT_SIZE"):
        super().__init__(message, code)


class EmptyDatasetError(PatchLabError):
    """Raised when an objective is evaluated on zero samples."""

    def __init__(self, message: str, code: str = "EMPTY_DATASET"):
        super().__init__(message, code)


class TrainingDivergedError(PatchLabError):
    """Raised when the loss or gradient stops being finite."""

    def __init__(self, message: str, step: int, last_good: Weights | None):
        super().__init__(message, "TRAINING_DIVERGED", {"step": step})
        self.step = step
        self.last_good = last_good
        self.checkpoint_path: Path | None = None


@dataclass
class ObjectiveValue:
    """Loss, filter gradient and the per-patch quantities they were built from."""

    loss: float
    grad: np.ndarray
    patch_grad: np.ndarray
    pre: np.ndarray
    outputs: np.ndarray
    aug_outputs: np.ndarray | None = None

    @property
    def grad_norm(self) -> float:
        return float(np.linalg.norm(self.grad))


class TrainingHook(Protocol):
    """Observer of a training run."""

    def on_step(self, t: int, W: Weights, objective: ObjectiveValue, eta: float) -> None:
        """Called with the pre-update weights W^(t) before the step to W^(t+1)."""

    def on_log(self, t: int, W: Weights) -> None:
        """Called at every logged step."""


# =============================================================================
# Objectives
# =============================================================================


def _require_samples(dataset: Dataset) -> None:
    if dataset.n == 0:
        raise EmptyDatasetError("objective evaluated on an empty dataset")


def erm_objective(W: Weights, dataset: Dataset) -> ObjectiveValue:
    """L_ERM(W) = (1/n) sum_i l(y_i f_W(X_i))."""
    _require_samples(dataset)
    pre = preactivations(W, dataset.X)
    z = patch_outputs(W, dataset.X, pre)
    f = z.sum(axis=1)
    y = dataset.y
    margins = y * f
    loss = float(np.mean(logistic_loss(margins)))
    dfi = y * np.asarray(logistic_loss_prime(margins)) / dataset.n
    G = np.repeat(dfi[:, None], dataset.P, axis=1)
    grad = patch_backprop(W, dataset.X, G, pre)
    return ObjectiveValue(loss=loss, grad=grad, patch_grad=G, pre=pre, outputs=f)


def cutout_objective(
    W: Weights, dataset: Dataset, C: int, allow_empty_cut: bool = False
) -> ObjectiveValue:
    """
    Exact Cutout loss: the mean over all binom(P, C) cut sets of l(y_i f_W(X_{i,C})).

    A cut patch is zeroed, so it contributes phi(0) = 0 to the output and nothing
    to the gradient. C = 0 is only accepted with allow_empty_cut (reduces to ERM).

    Raises:
        InvalidCutoutSizeError: If C is outside 1 <= C < P/2.
    """
    _require_samples(dataset)
    P = dataset.P
    if not (1 <= C and 2 * C < P) and not (allow_empty_cut and C == 0):
        raise InvalidCutoutSizeError(f"cutout size C={C} must satisfy 1 <= C < P/2 with P={P}")

    cut = cutout_sets(P, C)
    keep = (~cut).astype(float)
    n_sets = keep.shape[0]

    pre = preactivations(W, dataset.X)
    z = patch_outputs(W, dataset.X, pre)
    f_cut = z @ keep.T
    y = dataset.y[:, None]
    margins = y * f_cut
    loss = float(np.mean(logistic_loss(margins)))
    dfc = y * np.asarray(logistic_loss_prime(margins)) / (dataset.n * n_sets)
    G = dfc @ keep
    grad = patch_backprop(W, dataset.X, G, pre)
    return ObjectiveValue(
        loss=loss,
        grad=grad,
        patch_grad=G,
        pre=pre,
        outputs=z.sum(axis=1),
        aug_outputs=f_cut,
    )


def _tree_sum(parts: Sequence[tuple[float, np.ndarray]]) -> tuple[float, np.ndarray]:
    """Pairwise reduction in chunk order."""
    items = list(parts)
    while len(items) > 1:
        merged = []
        for a in range(0, len(items) - 1, 2):
            merged.append((items[a][0] + items[a + 1][0], items[a][1] + items[a + 1][1]))
        if len(items) % 2:
            merged.append(items[-1])
        items = merged
    return items[0]


def _cutmix_rows(
    z: np.ndarray, y: np.ndarray, rows: np.ndarray
) -> tuple[float, np.ndarray]:
    """
    Contribution of the pairs (i, j) with i in rows: summed loss and dLoss/dz.

    For subset S the mixed sample X_{i,j,S} takes patches S from i and the rest
    from j, so its output is A_S[i] + B_S[j] and the label weight on y_i is |S|/P.
    """
    n, P = z.shape
    masks, weights = cutmix_subsets(P)
    y_rows = y[rows][:, None].astype(float)
    y_cols = y[None, :].astype(float)
    loss = 0.0
    G = np.zeros((n, P))
    for mask, weight in zip(masks, weights, strict=True):
        lam = mask.sum() / P
        take = mask.astype(float)
        A = z[rows] @ take
        B = z @ (1.0 - take)
        out = A[:, None] + B[None, :]
        m_i = y_rows * out
        m_j = y_cols * out
        loss += weight * float(
            np.sum(lam * logistic_loss(m_i) + (1.0 - lam) * logistic_loss(m_j))
        )
        c = lam * y_rows * logistic_loss_prime(m_i) + (1.0 - lam) * y_cols * logistic_loss_prime(
            m_j
        )
        row_sums = np.zeros(n)
        row_sums[rows] = c.sum(axis=1)
        col_sums = c.sum(axis=0)
        G += weight * (
            row_sums[:, None] * take[None, :] + col_sums[:, None] * (1.0 - take)[None, :]
        )
    return loss, G


def cutmix_from_patch_outputs(
    z: np.ndarray, y: np.ndarray, threads: int = 1
) -> tuple[float, np.ndarray]:
    """
    Exact CutMix loss and dL/dz from per-patch contributions.

    Averages over all n^2 ordered pairs and all 2^P subsets. With threads > 1 the
    first pair index is split into contiguous chunks reduced pairwise in chunk order.

    Args:
        z: Per-patch contributions, shape (n, P).
        y: Labels in {+1, -1}, shape (n,).
        threads: Worker threads.

    Returns:
        (loss, G) with G of shape (n, P).
    """
    n = z.shape[0]
    if n == 0:
        raise EmptyDatasetError("objective evaluated on an empty dataset")
    if threads <= 1 or n < 2:
        loss, G = _cutmix_rows(z, y, np.arange(n))
    else:
        chunks = [c for c in np.array_split(np.arange(n), min(threads, n)) if len(c)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda rows: _cutmix_rows(z, y, rows), chunks))
        loss, G = _tree_sum(parts)
    scale = 1.0 / (n * n)
    return loss * scale, G * scale


def cutmix_objective(W: Weights, dataset: Dataset, threads: int = 1) -> ObjectiveValue:
    """Exact L_CutMix through the per-patch reparametrization."""
    _require_samples(dataset)
    pre = preactivations(W, dataset.X)
    z = patch_outputs(W, dataset.X, pre)
    loss, G = cutmix_from_patch_outputs(z, dataset.y, threads)
    grad = patch_backprop(W, dataset.X, G, pre)
    return ObjectiveValue(loss=loss, grad=grad, patch_grad=G, pre=pre, outputs=z.sum(axis=1))


def erm_loss_and_grad(W: Weights, dataset: Dataset) -> tuple[float, np.ndarray]:
    """ERM loss and filter gradient."""
    value = erm_objective(W, dataset)
    return value.loss, value.grad


def cutout_loss_and_grad(
    W: Weights, dataset: Dataset, C: int, allow_empty_cut: bool = False
) -> tuple[float, np.ndarray]:
    """Cutout loss and filter gradient."""
    value = cutout_objective(W, dataset, C, allow_empty_cut)
    return value.loss, value.grad


def cutmix_loss_and_grad(
    W: Weights, dataset: Dataset, threads: int = 1
) -> tuple[float, np.ndarray]:
    """CutMix loss and filter gradient."""
    value = cutmix_objective(W, dataset, threads)
    return value.loss, value.grad


def evaluate_objective(
    method: TrainingMethod, W: Weights, dataset: Dataset, C: int = 1, threads: int = 1
) -> ObjectiveValue:
    """Dispatch on the training method."""
    if method == TrainingMethod.ERM:
        return erm_objective(W, dataset)
    if method == TrainingMethod.CUTOUT:
        return cutout_objective(W, dataset, C)
    return cutmix_objective(W, dataset, threads)


# =============================================================================
# Trace
# =============================================================================

COEFFICIENT_COLUMNS = (
    "gamma_max_common",
    "gamma_max_rare",
    "gamma_max_extreme",
    "rho_max_dominant",
    "rho_max_background",
)


def trace_columns(K: int) -> list[str]:
    """Documented trace.csv header for K features per class."""
    outputs = [f"out_v_p1_{k + 1}" for k in range(K)] + [f"out_v_m1_{k + 1}" for k in range(K)]
    return [
        "t",
        "loss",
        "grad_norm",
        *outputs,
        "acc_train",
        "acc_aug",
        "acc_test_snapshot",
        *COEFFICIENT_COLUMNS,
    ]


def _format_cell(value: float) -> str:
    if isinstance(value, int):
        return str(value)
    return "nan" if math.isnan(value) else repr(float(value))


@dataclass
class TraceLog:
    """Per-logged-step time series; one row per logged step with strictly increasing t."""

    columns: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def append(self, values: dict[str, float]) -> None:
        t = int(values["t"])
        if self.rows and t <= self.rows[-1][0]:
            raise ValueError(f"trace steps must increase, got {t} after {self.rows[-1][0]}")
        self.rows.append([values.get(c, float("nan")) for c in self.columns])

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        idx = self.columns.index(name)
        return np.array([row[idx] for row in self.rows], dtype=float)

    @property
    def steps(self) -> np.ndarray:
        return self.column("t").astype(int)

    def first_below(self, name: str, tol: float) -> int | None:
        """First logged step whose value in a column is at most tol."""
        for t, value in zip(self.steps, self.column(name), strict=True):
            if value <= tol:
                return int(t)
        return None

    def write_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow(
                    [str(int(row[0]))] + [_format_cell(float(v)) for v in row[1:]]
                )
        return path

    @classmethod
    def read_csv(cls, path: Path) -> "TraceLog":
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            rows = [[float(v) for v in row] for row in reader]
        return cls(columns=columns, rows=rows)


# =============================================================================
# Gradient descent
# =============================================================================


@dataclass
class TrainingResult:
    """Outcome of run_training; (weights, trace) is the primary pair."""

    weights: Weights
    trace: TraceLog
    stop_reason: StopReason
    t_stop: int
    recorder: CoefficientRecorder | None = None


def _coefficient_summary(recorder: CoefficientRecorder | None, dataset: Dataset) -> dict:
    if recorder is None:
        return {}
    table = recorder.table
    summary = {}
    for tier in FeatureTier:
        ks = dataset.config.tier_indices(tier)
        summary[f"gamma_max_{tier.value}"] = (
            float(table.gamma[:, :, :, ks].max()) if ks else float("nan")
        )
    rho = table.rho
    dominant = dataset.dominant_mask
    background = dataset.background_mask
    summary["rho_max_dominant"] = float(rho[:, :, dominant].max())
    summary["rho_max_background"] = (
        float(rho[:, :, background].max()) if background.any() else float("nan")
    )
    return summary


def _log_row(
    t: int,
    W: Weights,
    objective: ObjectiveValue,
    dataset: Dataset,
    recorder: CoefficientRecorder | None,
    trace_test: Dataset | None,
) -> dict[str, float]:
    outputs = feature_output_trace(W, dataset.bank)
    K = dataset.bank.K
    row: dict[str, float] = {
        "t": t,
        "loss": objective.loss,
        "grad_norm": objective.grad_norm,
        "acc_train": float(np.mean(dataset.y * objective.outputs > 0)),
    }
    for k in range(K):
        row[f"out_v_p1_{k + 1}"] = float(outputs[0, k])
        row[f"out_v_m1_{k + 1}"] = float(outputs[1, k])
    if objective.aug_outputs is not None:
        row["acc_aug"] = float(np.mean(dataset.y[:, None] * objective.aug_outputs > 0))
    if trace_test is not None:
        row["acc_test_snapshot"] = accuracy_on(W, trace_test)
    row.update(_coefficient_summary(recorder, dataset))
    return row


def run_training(
    W0: Weights,
    dataset: Dataset,
    config: TrainConfig,
    hooks: Iterable[TrainingHook] = (),
    trace_test: Dataset | None = None,
    threads: int = 1,
) -> TrainingResult:
    """
    Run full-batch gradient descent W^(t+1) = W^(t) - eta * grad L(W^(t)).

    Stops after config.T steps, or earlier once the gradient norm reaches
    config.grad_tol. Rows are logged at multiples of log_every and at the final step.

    Args:
        W0: Initial weights.
        dataset: Training set.
        config: Method and schedule.
        hooks: Extra observers.
        trace_test: Fixed test set scored at logged steps.
        threads: Worker threads for the CutMix pair loop.

    Returns:
        TrainingResult with final weights, trace and stop reason.

    Raises:
        TrainingDivergedError: If the loss or gradient becomes non-finite.
    """
    recorder = (
        CoefficientRecorder(dataset, W0.m, config.method) if config.track_coefficients else None
    )
    observers: list[TrainingHook] = ([recorder] if recorder else []) + list(hooks)
    trace = TraceLog(columns=trace_columns(dataset.bank.K))

    logger.info(
        f"Training {config.method.value}: eta={config.eta} T={config.T}",
        extra={"method": config.method.value, "n": dataset.n, "d": dataset.d},
    )

    W = W0.replace(W0.w.copy())
    last_good: Weights | None = None
    stop_reason = StopReason.BUDGET
    t = 0
    for t in range(config.T + 1):
        objective = evaluate_objective(config.method, W, dataset, config.C, threads)
        if not (math.isfinite(objective.loss) and np.all(np.isfinite(objective.grad))):
            logger.error(
                f"Non-finite loss at step {t} for {config.method.value}",
                extra={"step": t, "loss": objective.loss},
            )
            raise TrainingDivergedError(
                f"{config.method.value} training diverged at step {t} (loss={objective.loss})",
                step=t,
                last_good=last_good,
            )

        converged = config.grad_tol is not None and objective.grad_norm <= config.grad_tol
        if t % config.log_every == 0 or t == config.T or converged:
            for hook in observers:
                hook.on_log(t, W)
            trace.append(_log_row(t, W, objective, dataset, recorder, trace_test))
            logger.debug(f"step {t}: loss={objective.loss:.6g} grad={objective.grad_norm:.3g}")

        if converged:
            stop_reason = StopReason.GRAD_TOL
            break
        if t == config.T:
            break

        for hook in observers:
            hook.on_step(t, W, objective, config.eta)
        last_good = W
        W = W.replace(W.w - config.eta * objective.grad)

    logger.info(
        f"Finished {config.method.value} at step {t} ({stop_reason.value})",
        extra={"method": config.method.value, "t_stop": t, "stop_reason": stop_reason.value},
    )
    return TrainingResult(
        weights=W, trace=trace, stop_reason=stop_reason, t_stop=t, recorder=recorder
    )

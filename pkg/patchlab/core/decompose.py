"""
Feature-noise decomposition of trained filters.

For every neuron of sign s,

    w_s - w_s^(0) = sum_{s',k} s s' gamma_s(s',k) v_{s',k}
                  + sum_{i, p != p*_i} s y_i rho_s(i,p) xi_i^(p) / ||xi_i^(p)||^2
                  + alpha sum_i s y_i rho_s(i,p~_i) v_{fn_i,1} / ||xi_i^(p~_i)||^2

The coefficients are obtained two ways: by projecting W - W^(0) onto
[v_{s,k} | xi_i^(p)] (CoefficientProjector) and by accumulating the per-step
recursions during training (CoefficientRecorder). Both go through the raw basis
coefficients (c_v, c_xi) of that projection.
"""

import logging
import math
from collections.abc import Iterator
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg

from patchlab.core.model import Weights, phi, phi_prime
from patchlab.core.synthdata import Dataset, sample_test_batch
from patchlab.errors import PatchLabError
from patchlab.models.common import ClauseResult
from patchlab.models.enums import ClauseStatus, TrainingMethod
from patchlab.models.reports import ApproxErrorReport, CoeffTableModel, EInitReport

if TYPE_CHECKING:
    from patchlab.core.train import ObjectiveValue

logger = logging.getLogger(__name__)

SIGN_VALUES = np.array([1, -1])
CONDITION_LIMIT = 1e10
MONOTONE_SLACK = 1e-12
APPROX_THRESHOLD = 0.05


class DecompositionError(PatchLabError):
    """Raised when the feature/noise basis is numerically dependent."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message, "SINGULAR_BASIS", details)


@dataclass
class CoeffTable:
    """
    Decomposition coefficients at one step.

    gamma has shape (2, m, 2, K) indexed [s, neuron, s', k]; rho has shape
    (2, m, n, P) indexed [s, neuron, i, p] and is zero at each feature patch.
    Sign axes are ordered (+1, -1); k, i and p are zero-based.
    """

    gamma: np.ndarray
    rho: np.ndarray
    residual_norm: float = 0.0
    step: int | None = None

    @classmethod
    def zeros(cls, m: int, K: int, n: int, P: int) -> "CoeffTable":
        return cls(gamma=np.zeros((2, m, 2, K)), rho=np.zeros((2, m, n, P)))

    def copy(self, step: int | None = None) -> "CoeffTable":
        return CoeffTable(
            gamma=self.gamma.copy(),
            rho=self.rho.copy(),
            residual_norm=self.residual_norm,
            step=self.step if step is None else step,
        )

    def gamma_of(self, s: int, s_prime: int, k: int, neuron: int = 0) -> float:
        return float(self.gamma[(1 - s) // 2, neuron, (1 - s_prime) // 2, k])

    def rho_of(self, s: int, i: int, p: int, neuron: int = 0) -> float:
        return float(self.rho[(1 - s) // 2, neuron, i, p])

    def to_model(self, source: str) -> CoeffTableModel:
        _, m, _, K = self.gamma.shape
        _, _, n, P = self.rho.shape
        return CoeffTableModel(
            step=self.step,
            m=m,
            K=K,
            n=n,
            P=P,
            gamma=self.gamma.tolist(),
            rho=self.rho.tolist(),
            residual_norm=self.residual_norm,
            source=source,
        )

    def max_relative_gap(self, other: "CoeffTable") -> float:
        """Largest entrywise gap relative to the larger coefficient scale."""
        scale = max(np.abs(self.gamma).max(), np.abs(self.rho).max(), 1e-300)
        gap = max(np.abs(self.gamma - other.gamma).max(), np.abs(self.rho - other.rho).max())
        return float(gap / scale)


# =============================================================================
# Raw basis coefficients <-> (gamma, rho)
# =============================================================================


def _label_sign_products(dataset: Dataset) -> np.ndarray:
    """(2, n) array of s * y_i for s in (+1, -1)."""
    return SIGN_VALUES[:, None] * dataset.y[None, :]


def raw_to_table(c_v: np.ndarray, c_xi: np.ndarray, dataset: Dataset) -> CoeffTable:
    """
    Convert raw projection coefficients to (gamma, rho).

    c_v is (2, m, 2, K) on the feature columns and c_xi is (2, m, n, P) on the raw
    noise columns. The alpha feature-noise term of every dominant patch is removed
    from the v_{s',1} coefficient before the sign convention is applied.
    """
    sy = _label_sign_products(dataset)
    norm_sq = dataset.noise_norm_sq
    safe = np.where(dataset.noise_mask, norm_sq, 1.0)
    rho = sy[:, None, :, None] * c_xi * safe[None, None, :, :]
    rho = np.where(dataset.noise_mask[None, None], rho, 0.0)

    c_feature = c_v.copy()
    idx = np.arange(dataset.n)
    dominant = c_xi[:, :, idx, dataset.p_tilde]
    alpha = dataset.config.alpha
    for sp_idx, sp in enumerate(SIGN_VALUES):
        members = dataset.fn_sign == sp
        c_feature[:, :, sp_idx, 0] -= alpha * dominant[:, :, members].sum(axis=-1)
    gamma = SIGN_VALUES[:, None, None, None] * SIGN_VALUES[None, None, :, None] * c_feature
    return CoeffTable(gamma=gamma, rho=rho)


def table_to_raw(table: CoeffTable, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of raw_to_table."""
    sy = _label_sign_products(dataset)
    norm_sq = np.where(dataset.noise_mask, dataset.noise_norm_sq, 1.0)
    c_xi = sy[:, None, :, None] * table.rho / norm_sq[None, None]
    c_xi = np.where(dataset.noise_mask[None, None], c_xi, 0.0)

    c_v = SIGN_VALUES[:, None, None, None] * SIGN_VALUES[None, None, :, None] * table.gamma
    idx = np.arange(dataset.n)
    dominant = c_xi[:, :, idx, dataset.p_tilde]
    alpha = dataset.config.alpha
    for sp_idx, sp in enumerate(SIGN_VALUES):
        members = dataset.fn_sign == sp
        c_v[:, :, sp_idx, 0] += alpha * dominant[:, :, members].sum(axis=-1)
    return c_v, c_xi


def reconstruct_delta(table: CoeffTable, dataset: Dataset) -> np.ndarray:
    """W - W^(0) implied by the coefficients, shape (2, m, d)."""
    c_v, c_xi = table_to_raw(table, dataset)
    features = np.einsum("smak,akd->smd", c_v, dataset.bank.vectors)
    noise = np.einsum("smip,ipd->smd", c_xi, dataset.noise)
    return features + noise


# =============================================================================
# Projection
# =============================================================================


class CoefficientProjector:
    """
    Least-squares projection of W - W^(0) onto [v_{s,k} | xi_i^(p)].

    The basis is factorized once; each projection is then a triangular solve.
    """

    def __init__(self, dataset: Dataset):
        self._dataset = dataset
        self._noise_index = np.argwhere(dataset.noise_mask)
        feature_cols = dataset.bank.matrix
        noise_cols = dataset.noise[dataset.noise_mask].T
        self._basis = np.hstack([feature_cols, noise_cols])
        self._labels = [
            f"v[{'+1' if si == 0 else '-1'},k={k + 1}]"
            for si in range(2)
            for k in range(dataset.bank.K)
        ] + [f"xi[i={i},p={p}]" for i, p in self._noise_index]

        _, svals, vt = scipy.linalg.svd(self._basis, full_matrices=False)
        self.condition_number = float(svals[0] / svals[-1]) if svals[-1] > 0 else math.inf
        if self.condition_number > CONDITION_LIMIT:
            weights = np.abs(vt[-1])
            worst = np.argsort(weights)[::-1][:3]
            culprits = [self._labels[j] for j in worst]
            raise DecompositionError(
                f"basis is near-dependent (condition number {self.condition_number:.3g}); "
                f"columns involved: {', '.join(culprits)}",
                {"condition_number": self.condition_number, "columns": culprits},
            )
        self._q, self._r = scipy.linalg.qr(self._basis, mode="economic")
        self._gram_factor = scipy.linalg.cho_factor(self._basis.T @ self._basis)
        logger.debug(
            f"Factorized decomposition basis {self._basis.shape} "
            f"(condition {self.condition_number:.3g})"
        )

    @property
    def labels(self) -> list[str]:
        return list(self._labels)

    def _solve(self, rhs: np.ndarray, solver: str) -> np.ndarray:
        if solver == "qr":
            return scipy.linalg.solve_triangular(self._r, self._q.T @ rhs)
        if solver == "normal":
            return scipy.linalg.cho_solve(self._gram_factor, self._basis.T @ rhs)
        raise ValueError(f"unknown solver {solver!r}")

    def project(self, W: Weights, W0: np.ndarray, solver: str = "qr") -> CoeffTable:
        """
        Coefficients of W - W0.

        Args:
            W: Current weights.
            W0: Initial filter values, shape (2, m, d).
            solver: "qr" (orthogonalized) or "normal" (Cholesky of the Gram matrix).

        Returns:
            CoeffTable with the projection residual norm.
        """
        ds = self._dataset
        m, K = W.m, ds.bank.K
        delta = (W.w - W0).reshape(2 * m, W.d).T
        coef = self._solve(delta, solver)
        residual = float(np.linalg.norm(self._basis @ coef - delta))

        c_v = coef[: 2 * K].T.reshape(2, m, 2, K)
        c_xi = np.zeros((2, m, ds.n, ds.P))
        rows, cols = self._noise_index[:, 0], self._noise_index[:, 1]
        c_xi[:, :, rows, cols] = coef[2 * K :].T.reshape(2, m, -1)
        table = raw_to_table(c_v, c_xi, ds)
        table.residual_norm = residual
        return table


def project_coefficients(
    W: Weights, W0: Weights | np.ndarray, dataset: Dataset, solver: str = "qr"
) -> CoeffTable:
    """One-shot projection; build a CoefficientProjector to reuse the factorization."""
    init = W0.w if isinstance(W0, Weights) else W0
    return CoefficientProjector(dataset).project(W, init, solver)


# =============================================================================
# Recursions
# =============================================================================


@dataclass
class CoefficientRecorder:
    """
    Accumulates gamma and rho with the per-step recursions.

    With G[i, p] = dL/dz_i^(p) at W^(t) and m neurons per sign, one step adds

        gamma_{s,r}(y_i, k_i) += -(eta/m) y_i G[i, p*_i] phi'(<w_{s,r}, v_{y_i,k_i}>)
        rho_{s,r}(i, p)       += -(eta/m) y_i G[i, p] phi'(<w_{s,r}, x_i^(p)>) ||xi_i^(p)||^2

    which for m = 1 are the ERM, Cutout and CutMix recursions with the method's
    g values folded into G.
    """

    dataset: Dataset
    m: int
    method: TrainingMethod
    table: CoeffTable = field(init=False)
    history: list[CoeffTable] = field(default_factory=list, init=False)
    min_gamma_increment: float = field(default=math.inf, init=False)
    min_rho_increment: float = field(default=math.inf, init=False)

    def __post_init__(self) -> None:
        ds = self.dataset
        self.table = CoeffTable.zeros(self.m, ds.bank.K, ds.n, ds.P)
        self._label_idx = (1 - ds.y) // 2
        self._rows = np.arange(ds.n)
        self._norm_sq = ds.noise_norm_sq

    def on_step(self, t: int, W: Weights, objective: "ObjectiveValue", eta: float) -> None:
        ds = self.dataset
        G = objective.patch_grad
        slopes = np.asarray(phi_prime(objective.pre, W.act))
        base = -(eta / self.m) * ds.y[:, None] * G

        feature_terms = base[self._rows, ds.p_star][:, None, None] * slopes[
            self._rows, ds.p_star
        ]
        d_gamma = np.zeros_like(self.table.gamma)
        for si in range(2):
            for r in range(self.m):
                np.add.at(d_gamma[si, r], (self._label_idx, ds.k), feature_terms[:, si, r])

        d_rho = (base * self._norm_sq)[None, None] * np.moveaxis(slopes, (2, 3), (0, 1))
        d_rho = np.where(ds.noise_mask[None, None], d_rho, 0.0)

        self.min_gamma_increment = min(self.min_gamma_increment, float(d_gamma.min()))
        self.min_rho_increment = min(self.min_rho_increment, float(d_rho.min()))
        self.table.gamma += d_gamma
        self.table.rho += d_rho

    def on_log(self, t: int, W: Weights) -> None:
        self.history.append(self.table.copy(step=t))

    @property
    def is_monotone(self) -> bool:
        """No coefficient decreased by more than the slack at any step."""
        return min(self.min_gamma_increment, self.min_rho_increment) >= -MONOTONE_SLACK


@dataclass
class ProjectionRecorder:
    """Projects the weights at every logged step."""

    projector: CoefficientProjector
    init: np.ndarray
    history: list[CoeffTable] = field(default_factory=list)

    def on_step(self, t: int, W: Weights, objective: "ObjectiveValue", eta: float) -> None:
        return None

    def on_log(self, t: int, W: Weights) -> None:
        table = self.projector.project(W, self.init)
        table.step = t
        self.history.append(table)


def iter_coefficient_rows(
    table: CoeffTable, dataset: Dataset
) -> Iterator[tuple[str, int, int, int, int, float]]:
    """
    Long-format rows (kind, s, neuron, a, b, value).

    gamma rows use a = s' and b = k (1-based); rho rows use a = i and b = p
    (zero-based) and skip feature patches.
    """
    _, m, _, K = table.gamma.shape
    for si, s in enumerate(SIGN_VALUES):
        for r in range(m):
            for spi, sp in enumerate(SIGN_VALUES):
                for k in range(K):
                    yield ("gamma", int(s), r, int(sp), k + 1, float(table.gamma[si, r, spi, k]))
            for i, p in np.argwhere(dataset.noise_mask):
                yield ("rho", int(s), r, int(i), int(p), float(table.rho[si, r, i, p]))


# =============================================================================
# Initialization event audit
# =============================================================================


def _upper(name: str, inequality: str, values: np.ndarray, bound: float) -> ClauseResult:
    if values.size == 0:
        return ClauseResult(name=name, inequality=inequality, status=ClauseStatus.NOT_APPLICABLE)
    worst = float(values.max())
    return ClauseResult(
        name=name,
        inequality=inequality,
        status=ClauseStatus.PASS if worst <= bound else ClauseStatus.FAIL,
        measured=worst,
        bound=float(bound),
        margin=float(bound - worst),
    )


def _band(
    name: str,
    inequality: str,
    values: np.ndarray,
    low: np.ndarray | float,
    high: np.ndarray | float,
) -> ClauseResult:
    if values.size == 0:
        return ClauseResult(name=name, inequality=inequality, status=ClauseStatus.NOT_APPLICABLE)
    slack = np.minimum(values - low, high - values)
    j = int(np.argmin(slack))
    margin = float(slack.flat[j])
    return ClauseResult(
        name=name,
        inequality=inequality,
        status=ClauseStatus.PASS if margin >= 0 else ClauseStatus.FAIL,
        measured=float(values.flat[j]),
        bound=float(np.broadcast_to(high, values.shape).flat[j]),
        margin=margin,
    )


def _off_diagonal(gram: np.ndarray) -> np.ndarray:
    return np.abs(gram[~np.eye(gram.shape[0], dtype=bool)])


def check_e_init(
    dataset: Dataset,
    W0: Weights,
    fresh_draws: int = 0,
    rng: np.random.Generator | None = None,
) -> EInitReport:
    """
    Evaluate every clause of the initialization event on this realization.

    Args:
        dataset: Training set.
        W0: Initial weights; sigma_0 is read from W0.sigma_0, falling back to the
            empirical entry standard deviation.
        fresh_draws: If positive, also check fresh test noise against training noise.
        rng: Generator for the fresh draws.

    Returns:
        EInitReport with one ClauseResult per inequality.
    """
    cfg = dataset.config
    n, d, P, K = dataset.n, dataset.d, dataset.P, dataset.bank.K
    log_d = math.log(d)
    sqrt_d = math.sqrt(d)
    init = W0.init if W0.init is not None else W0.w
    sigma_0 = W0.sigma_0 if math.isfinite(W0.sigma_0) else float(init.std())
    filters = init.reshape(-1, d)
    clauses: list[ClauseResult] = []

    class_sizes = np.array([len(dataset.V(1)), len(dataset.V(-1))], dtype=float)
    clauses.append(
        _band("class_balance", "25n/52 <= |V_s| <= 27n/52", class_sizes, 25 * n / 52, 27 * n / 52)
    )

    counts = np.array([[len(dataset.V_sk(s, k)) for k in range(K)] for s in (1, -1)], float)
    rho = np.array(cfg.rho)[None, :]
    clauses.append(
        _band(
            "feature_counts",
            "rho_k n/4 <= |V_{s,k}| <= 3 rho_k n/4",
            counts,
            rho * n / 4,
            3 * rho * n / 4,
        )
    )

    covered = np.unique(dataset.p_star[dataset.V_sk(1, 0)])
    clauses.append(
        ClauseResult(
            name="feature_patch_coverage",
            inequality="{p*_i : i in V_{1,1}} = [P]",
            status=ClauseStatus.PASS if len(covered) == P else ClauseStatus.FAIL,
            measured=float(len(covered)),
            bound=float(P),
            margin=float(len(covered) - P),
        )
    )

    feature_inner = np.abs(filters @ dataset.bank.matrix)
    clauses.append(
        _upper(
            "init_feature",
            "|<w_s^(0), v_{s',k}>| <= sigma_0 log d",
            feature_inner,
            sigma_0 * log_d,
        )
    )

    dominant = dataset.noise[dataset.dominant_mask]
    background = dataset.noise[dataset.background_mask]
    clauses.append(
        _upper(
            "init_dominant_noise",
            "|<w_s^(0), xi_i^(p~)>| <= sigma_0 sigma_d sqrt(d) log d",
            np.abs(filters @ dominant.T),
            sigma_0 * cfg.sigma_d * sqrt_d * log_d,
        )
    )
    clauses.append(
        _upper(
            "init_background_noise",
            "|<w_s^(0), xi_i^(p)>| <= sigma_0 sigma_b sqrt(d) log d",
            np.abs(filters @ background.T),
            sigma_0 * cfg.sigma_b * sqrt_d * log_d,
        )
    )

    dom_gram = dominant @ dominant.T
    bg_gram = background @ background.T
    clauses.append(
        _band(
            "dominant_norm",
            "sigma_d^2 d/2 <= ||xi_i^(p~)||^2 <= 3 sigma_d^2 d/2",
            np.diag(dom_gram),
            cfg.sigma_d**2 * d / 2,
            3 * cfg.sigma_d**2 * d / 2,
        )
    )
    clauses.append(
        _upper(
            "dominant_inner",
            "|<xi_i^(p~), xi_j^(p~)>| <= sigma_d^2 sqrt(d) log d",
            _off_diagonal(dom_gram),
            cfg.sigma_d**2 * sqrt_d * log_d,
        )
    )
    clauses.append(
        _upper(
            "dominant_background_inner",
            "|<xi_i^(p~), xi_j^(q)>| <= sigma_d sigma_b sqrt(d) log d",
            np.abs(dominant @ background.T),
            cfg.sigma_d * cfg.sigma_b * sqrt_d * log_d,
        )
    )
    clauses.append(
        _band(
            "background_norm",
            "sigma_b^2 d/2 <= ||xi_i^(p)||^2 <= 3 sigma_b^2 d/2",
            np.diag(bg_gram),
            cfg.sigma_b**2 * d / 2,
            3 * cfg.sigma_b**2 * d / 2,
        )
    )
    clauses.append(
        _upper(
            "background_inner",
            "|<xi_i^(p), xi_j^(q)>| <= sigma_b^2 sqrt(d) log d",
            _off_diagonal(bg_gram),
            cfg.sigma_b**2 * sqrt_d * log_d,
        )
    )

    basis = np.hstack([dataset.bank.matrix, dataset.X[dataset.noise_mask].T])
    svals = scipy.linalg.svdvals(basis)
    rank_tol = max(basis.shape) * np.finfo(float).eps * svals[0]
    clauses.append(
        ClauseResult(
            name="linear_independence",
            inequality="sigma_min([v_{s,k} | x_i^(p), p != p*]) > rank tolerance",
            status=ClauseStatus.PASS if svals[-1] > rank_tol else ClauseStatus.FAIL,
            measured=float(svals[-1]),
            bound=float(rank_tol),
            margin=float(svals[-1] - rank_tol),
        )
    )

    if fresh_draws > 0:
        clauses.append(check_fresh_noise(dataset, fresh_draws, rng))

    failed = [c.name for c in clauses if not c.passed]
    for name in failed:
        logger.warning(f"Initialization clause failed: {name}", extra={"clause": name})
    return EInitReport(
        success=not failed,
        message="all clauses hold" if not failed else f"failed: {', '.join(failed)}",
        clauses=clauses,
        d=d,
        n=n,
    )


def check_fresh_noise(
    dataset: Dataset, draws: int, rng: np.random.Generator | None = None
) -> ClauseResult:
    """|<xi, xi_i^(p)>| <= sigma sigma_i sqrt(d) log d for fresh noise xi versus training noise."""
    cfg = dataset.config
    rng = rng or np.random.Generator(np.random.Philox(cfg.seed + 1))
    fresh = sample_test_batch(dataset.bank, cfg, rng, draws)
    sigma_train = np.where(dataset.dominant_mask, cfg.sigma_d, cfg.sigma_b)[dataset.noise_mask]
    sigma_fresh = np.where(fresh.dominant_mask, cfg.sigma_d, cfg.sigma_b)[fresh.noise_mask]
    inner = np.abs(fresh.noise[fresh.noise_mask] @ dataset.noise[dataset.noise_mask].T)
    scale = np.outer(sigma_fresh, sigma_train) * math.sqrt(dataset.d) * math.log(dataset.d)
    ratio = inner / scale
    return _upper(
        "fresh_noise_inner",
        "|<xi, xi_i^(p)>| <= sigma sigma_i sqrt(d) log d (as ratio <= 1)",
        ratio,
        1.0,
    )


# =============================================================================
# Approximation gaps
# =============================================================================


def approx_error_audit(
    W: Weights, table: CoeffTable, dataset: Dataset, threshold: float = APPROX_THRESHOLD
) -> ApproxErrorReport:
    """
    Measure how far inner products are from their coefficient approximations.

    The threshold is an empirical reporting convention applied to feature gaps.
    """
    bank = dataset.bank
    own_gaps, cross_gaps = [], []
    for si, s in enumerate(SIGN_VALUES):
        for k in range(bank.K):
            own = W.w[si] @ bank.vector(int(s), k)
            cross = W.w[si] @ bank.vector(int(-s), k)
            own_gaps.append(np.abs(own - table.gamma[si, :, si, k]))
            cross_gaps.append(np.abs(cross + table.gamma[si, :, 1 - si, k]))

    mask = dataset.noise_mask
    inner = np.einsum("smd,ipd->smip", W.w, dataset.noise)
    label_idx = (1 - dataset.y) // 2
    rows = np.arange(dataset.n)
    own_inner = inner[label_idx, :, rows, :]
    own_rho = table.rho[label_idx, :, rows, :]
    cross_inner = inner[1 - label_idx, :, rows, :]
    cross_rho = table.rho[1 - label_idx, :, rows, :]
    noise_mask = np.broadcast_to(mask[:, None, :], own_inner.shape)

    noise_own = np.abs(own_inner - own_rho)[noise_mask]
    noise_cross = np.abs(cross_inner + cross_rho)[noise_mask]
    phi_own = np.abs(
        np.asarray(phi(own_inner, W.act)) - np.asarray(phi(own_rho, W.act))
    )[noise_mask]

    feature_own = float(np.max(own_gaps))
    feature_cross = float(np.max(cross_gaps))
    worst = max(feature_own, feature_cross)
    return ApproxErrorReport(
        success=worst <= threshold,
        message=f"max feature gap {worst:.4g} (threshold {threshold})",
        feature_gap_own=feature_own,
        feature_gap_cross=feature_cross,
        noise_gap_own=float(noise_own.max()),
        noise_gap_cross=float(noise_cross.max()),
        phi_noise_gap_own=float(phi_own.max()),
        threshold=threshold,
    )

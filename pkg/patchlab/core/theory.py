"""
Convex reparametrization of the CutMix loss.

Z collects the per-feature contributions z_{s,k} = phi(<w_1, v_{s,k}>) - phi(<w_-1, v_{s,k}>)
and the per-patch contributions z_i^(p) for every non-feature patch. The feature
patch of sample i aliases z_{y_i,k_i}. With a_{i,j,S} selecting the patches of the
mixed sample X_{i,j,S},

    h(Z) = (1/n^2) sum_{i,j} E_S[(|S|/P) l(y_i <a, Z>) + (1 - |S|/P) l(y_j <a, Z>)]

and h(Z(W)) = L_CutMix(W). h is convex in Z, and its minimizer gives every
patch of a label-s sample the same contribution s * z*_s.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from patchlab.core.evaluation import feature_output_trace
from patchlab.core.model import (
    Weights,
    logistic_loss_prime,
    logistic_loss_second,
    patch_outputs,
    phi_prime,
)
from patchlab.core.subsets import cutmix_subsets, expect_over_cardinality
from patchlab.core.synthdata import Dataset
from patchlab.core.train import ObjectiveValue, cutmix_from_patch_outputs, cutmix_objective
from patchlab.errors import PatchLabError
from patchlab.models.configs import ActivationParams, DataConfig
from patchlab.models.reports import GlobalMin, SmoothnessReport, UniformMinimumReport

logger = logging.getLogger(__name__)

HESSIAN_MAX_DIM = 200
BISECT_XTOL = 1e-14
RESIDUAL_TOL = 1e-10
MAX_BRACKET_DOUBLINGS = 60
SIGN_MARGIN = 1e-9
LOGIT_RANGE = 700.0
UNIFORM_BAND = 0.1


class SolverError(PatchLabError):
    """Raised when the stationarity system cannot be bracketed or solved."""

    def __init__(self, message: str, interval: tuple[float, float] | None = None):
        super().__init__(message, "SOLVER_ERROR", {"interval": interval})
        self.interval = interval


class HessianTooLargeError(PatchLabError):
    """Raised when a dense Hessian would exceed the dimension guard."""

    def __init__(self, message: str):
        super().__init__(message, "HESSIAN_TOO_LARGE")


# =============================================================================
# Z coordinates
# =============================================================================


@dataclass(frozen=True)
class ZLayout:
    """
    Coordinate map of Z for one dataset.

    The first 2K coordinates are z_{s,k} (sign +1 first); the rest are z_i^(p) for
    non-feature patches in row-major (i, p) order. index[i, p] is the coordinate
    that patch (i, p) reads, so index[i, p*_i] points at z_{y_i,k_i}.
    """

    index: np.ndarray
    labels: np.ndarray
    K: int
    P: int

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "ZLayout":
        K = dataset.bank.K
        index = np.zeros((dataset.n, dataset.P), dtype=np.int64)
        mask = dataset.noise_mask
        index[mask] = 2 * K + np.arange(int(mask.sum()))
        rows = np.arange(dataset.n)
        index[rows, dataset.p_star] = ((1 - dataset.y) // 2) * K + dataset.k
        index.setflags(write=False)
        return cls(index=index, labels=dataset.y.copy(), K=K, P=dataset.P)

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return 2 * self.K + self.n * (self.P - 1)


@dataclass(frozen=True)
class ZVector:
    """A point in Z coordinates together with its layout."""

    values: np.ndarray
    layout: ZLayout

    def __post_init__(self) -> None:
        if self.values.shape != (self.layout.dim,):
            raise ValueError(f"Z must have {self.layout.dim} entries, got {self.values.shape}")

    @property
    def z_feature(self) -> np.ndarray:
        """(2, K) per-feature contributions."""
        return self.values[: 2 * self.layout.K].reshape(2, self.layout.K)

    @property
    def z_patch(self) -> np.ndarray:
        """(n, P) per-patch contributions with the feature-patch alias filled in."""
        return self.values[self.layout.index]


def compute_z(W: Weights, dataset: Dataset) -> ZVector:
    """Per-feature and per-realized-patch contributions of W."""
    layout = ZLayout.from_dataset(dataset)
    values = np.empty(layout.dim)
    values[: 2 * layout.K] = feature_output_trace(W, dataset.bank).ravel()
    values[2 * layout.K :] = patch_outputs(W, dataset.X)[dataset.noise_mask]
    return ZVector(values=values, layout=layout)


def analytic_minimum(global_min: GlobalMin, layout: ZLayout) -> ZVector:
    """Z with z_{s,k} = s z*_s and z_i^(p) = y_i z*_{y_i}."""
    values = np.empty(layout.dim)
    K = layout.K
    values[:K] = global_min.z1_star
    values[K : 2 * K] = -global_min.zm1_star
    patch_values = np.where(layout.labels == 1, global_min.z1_star, -global_min.zm1_star)
    noise_owner = np.repeat(patch_values, layout.P - 1)
    values[2 * K :] = noise_owner
    return ZVector(values=values, layout=layout)


def h_value_and_grad(Z: ZVector, threads: int = 1) -> tuple[float, np.ndarray]:
    """h(Z) and its gradient in Z coordinates."""
    layout = Z.layout
    loss, G = cutmix_from_patch_outputs(Z.z_patch, layout.labels, threads)
    grad = np.bincount(layout.index.ravel(), weights=G.ravel(), minlength=layout.dim)
    return loss, grad


def h_value(Z: ZVector) -> float:
    """The reparametrized CutMix loss."""
    return h_value_and_grad(Z)[0]


def h_grad(Z: ZVector) -> np.ndarray:
    """Gradient of h with respect to Z."""
    return h_value_and_grad(Z)[1]


def _mixing_rows(layout: ZLayout) -> tuple[np.ndarray, np.ndarray]:
    """All a_{i,j,S} as rows, with their probabilities P(S)."""
    n, P, D = layout.n, layout.P, layout.dim
    masks, weights = cutmix_subsets(P)
    A = np.zeros((n, n, len(masks), D))
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    for b, mask in enumerate(masks):
        for p in range(P):
            owner = ii if mask[p] else jj
            np.add.at(A[:, :, b, :], (ii, jj, layout.index[owner, p]), 1.0)
    return A.reshape(-1, D), np.tile(weights, n * n)


def h_hessian(Z: ZVector, max_dim: int = HESSIAN_MAX_DIM) -> np.ndarray:
    """
    Dense Hessian (1/n^2) sum_{i,j} E_S[l''(<a, Z>) a a^T].

    Raises:
        HessianTooLargeError: If the dimension exceeds max_dim.
    """
    layout = Z.layout
    if layout.dim > max_dim:
        raise HessianTooLargeError(f"Hessian dimension {layout.dim} exceeds guard {max_dim}")
    A, probs = _mixing_rows(layout)
    curvature = probs * np.asarray(logistic_loss_second(A @ Z.values)) / layout.n**2
    H = A.T @ (curvature[:, None] * A)
    return 0.5 * (H + H.T)


# =============================================================================
# Jacobian of Z with respect to W
# =============================================================================


def jacobian(W: Weights, dataset: Dataset) -> np.ndarray:
    """
    J(W) of shape (2*m*d, dim Z); column c is the gradient of coordinate c of Z
    with respect to the flattened filters W.w.
    """
    directions = np.vstack(
        [dataset.bank.vectors.reshape(-1, dataset.d), dataset.X[dataset.noise_mask]]
    )
    pre = directions @ W.w.reshape(2 * W.m, W.d).T
    slopes = np.asarray(phi_prime(pre, W.act))
    signs = np.repeat([1.0, -1.0], W.m) / W.m
    cols = (slopes * signs)[:, :, None] * directions[:, None, :]
    return cols.reshape(len(directions), -1).T


def jacobian_min_singular(W: Weights, dataset: Dataset) -> float:
    """Smallest singular value of J(W)."""
    return float(scipy.linalg.svdvals(jacobian(W, dataset)).min())


# =============================================================================
# Global minimum of h
# =============================================================================


def g_value(s: int, z1: float, zm1: float, n_pos: int, n_neg: int, P: int) -> float:
    """
    g_s(z1, z-1) = (|V_s|/|V_-s|) l'(P z_s) + (2/P) E_S[|S| l'(|S| z_s - (P - |S|) z_-s)]
    + (P - 1)/(3P).
    """
    return _g_terms(s, z1, zm1, n_pos, n_neg, P)[0]


def _g_terms(
    s: int, z1: float, zm1: float, n_pos: int, n_neg: int, P: int
) -> tuple[float, float]:
    """g_s and the sum of the magnitudes of its terms."""
    z_s, z_o = (z1, zm1) if s == 1 else (zm1, z1)
    ratio = n_pos / n_neg if s == 1 else n_neg / n_pos
    own = ratio * float(logistic_loss_prime(P * z_s))
    slopes = [c * float(logistic_loss_prime(c * z_s - (P - c) * z_o)) for c in range(P + 1)]
    mixed = expect_over_cardinality(P, lambda c: slopes[c])
    constant = (P - 1) / (3.0 * P)
    scale = abs(own) + 2.0 / P * expect_over_cardinality(P, lambda c: abs(slopes[c])) + constant
    return own + 2.0 / P * mixed + constant, scale


def _bracket_up(
    f: Callable[[float], tuple[float, float]], lo: float, hi: float, P: int, what: str
) -> float:
    """
    Double hi until f(hi) is positive by more than rounding of its terms.

    A sign change inside SIGN_MARGIN * scale is cancellation noise, not a root. The
    search stops once P * hi leaves the range where l' is representable.
    """
    start = hi
    for _ in range(MAX_BRACKET_DOUBLINGS):
        value, scale = f(hi)
        if value > SIGN_MARGIN * scale:
            return hi
        if P * hi > LOGIT_RANGE:
            break
        hi *= 2.0
    raise SolverError(
        f"could not bracket {what}: no sign change on [{lo}, {hi}] (started at {start})",
        (lo, hi),
    )


def _inner_root(z1: float, n_pos: int, n_neg: int, P: int) -> float:
    """S(z1): the root in z-1 of g_-1(z1, .), which is increasing in z-1."""

    def terms(z: float) -> tuple[float, float]:
        return _g_terms(-1, z1, z, n_pos, n_neg, P)

    def f(z: float) -> float:
        return terms(z)[0]

    lo, hi = 0.0, P * z1 + math.log(9.0)
    value, scale = terms(lo)
    if value >= -SIGN_MARGIN * scale:
        raise SolverError(f"g_-1({z1}, 0) = {value} is not negative", (lo, hi))
    value, scale = terms(hi)
    if value <= SIGN_MARGIN * scale:
        logger.warning(
            f"inner bracket [0, P z1 + log 9] failed at z1={z1}; expanding",
            extra={"z1": z1, "P": P},
        )
        hi = _bracket_up(terms, lo, hi, P, "S(z1)")
    return float(scipy.optimize.bisect(f, lo, hi, xtol=BISECT_XTOL, maxiter=500))


def solve_global_minimum(n_pos: int, n_neg: int, P: int) -> GlobalMin:
    """
    Solve g_1 = g_-1 = 0 for the positive pair (z1*, z-1*).

    Nested bisection: S(z1) solves g_-1(z1, S(z1)) = 0 on [0, P z1 + log 9], then
    z1* solves g_1(z1, S(z1)) = 0 on [0, hi] with hi doubled until it brackets.
    Both brackets need a sign change larger than the rounding of the terms of g, so
    systems whose g only approaches zero (balanced P = 2) raise instead of returning
    a point where l' has decayed below the tolerance.

    Args:
        n_pos: |V_1|.
        n_neg: |V_-1|.
        P: Patches per sample.

    Returns:
        GlobalMin with both residuals.

    Raises:
        SolverError: If a bracket cannot be found or residuals exceed tolerance.
    """
    if n_pos < 1 or n_neg < 1:
        raise SolverError(f"both classes must be non-empty, got {n_pos} and {n_neg}")
    if P < 2:
        raise SolverError(f"P must be at least 2, got {P}")

    def outer_terms(z1: float) -> tuple[float, float]:
        return _g_terms(1, z1, _inner_root(z1, n_pos, n_neg, P), n_pos, n_neg, P)

    def outer(z1: float) -> float:
        return outer_terms(z1)[0]

    lo = 0.0
    value, scale = outer_terms(lo)
    if value >= -SIGN_MARGIN * scale:
        raise SolverError(f"g_1(0, S(0)) = {value} is not negative", (lo, lo))
    hi = _bracket_up(outer_terms, lo, 1.0, P, "z1*")
    z1, result = scipy.optimize.bisect(
        outer, lo, hi, xtol=BISECT_XTOL, maxiter=500, full_output=True
    )
    zm1 = _inner_root(z1, n_pos, n_neg, P)
    g1, scale1 = _g_terms(1, z1, zm1, n_pos, n_neg, P)
    gm1, scalem1 = _g_terms(-1, z1, zm1, n_pos, n_neg, P)
    r1, rm1 = abs(g1), abs(gm1)
    if (
        max(r1, rm1) > RESIDUAL_TOL
        or max(r1 / scale1, rm1 / scalem1) > RESIDUAL_TOL
        or not result.converged
    ):
        raise SolverError(
            f"solver did not converge: residuals {r1:.3g}, {rm1:.3g} at z1={z1}", (lo, hi)
        )
    logger.info(
        f"CutMix global minimum z1*={z1:.10g} z-1*={zm1:.10g}",
        extra={"n_pos": n_pos, "n_neg": n_neg, "P": P, "iterations": result.iterations},
    )
    return GlobalMin(
        z1_star=float(z1),
        zm1_star=float(zm1),
        residual_g1=r1,
        residual_gm1=rm1,
        iterations=int(result.iterations),
        n_pos=n_pos,
        n_neg=n_neg,
        P=P,
    )


def verify_uniform_minimum(
    W: Weights, dataset: Dataset, global_min: GlobalMin, band: float = UNIFORM_BAND
) -> UniformMinimumReport:
    """Compare every y_i z_i^(p) of trained weights with z*_{y_i}."""
    Z = compute_z(W, dataset)
    z_star = np.where(dataset.y == 1, global_min.z1_star, global_min.zm1_star)[:, None]
    deviation = np.abs(dataset.y[:, None] * Z.z_patch - z_star)
    relative = float((deviation / z_star).max())
    grad_norm = float(np.linalg.norm(h_grad(Z)))
    return UniformMinimumReport(
        success=relative <= band,
        message=f"max relative deviation {relative:.4g} (band {band})",
        max_deviation=float(deviation.max()),
        relative_deviation=relative,
        grad_h_norm=grad_norm,
        C1=global_min.z1_star,
        Cm1=global_min.zm1_star,
        band=band,
    )


# =============================================================================
# Smoothness
# =============================================================================


def smoothness_constant(act: ActivationParams, config: DataConfig) -> float:
    """L = 9 r^-1 P sigma_d^2 d."""
    return 9.0 / act.r * config.P * config.sigma_d**2 * config.d


def smoothness_ratio(W1: Weights, W2: Weights, dataset: Dataset) -> float:
    """||grad L(W1) - grad L(W2)|| / ||W1 - W2|| for the CutMix loss."""
    g1 = cutmix_objective(W1, dataset).grad
    g2 = cutmix_objective(W2, dataset).grad
    return float(np.linalg.norm(g1 - g2) / np.linalg.norm(W1.w - W2.w))


@dataclass
class GradientNormAccumulator:
    """Accumulates ||grad L(W^(t))||^2 over every step of a run."""

    total: float = 0.0
    steps: int = 0
    initial_loss: float | None = None

    def on_step(self, t: int, W: Weights, objective: ObjectiveValue, eta: float) -> None:
        if self.initial_loss is None:
            self.initial_loss = objective.loss
        self.total += objective.grad_norm**2
        self.steps += 1

    def on_log(self, t: int, W: Weights) -> None:
        return None

    def report(self, L: float, eta: float) -> SmoothnessReport:
        mean_sq = self.total / self.steps if self.steps else 0.0
        bound = None
        holds = None
        if self.steps and eta > 0 and self.initial_loss is not None:
            bound = 2.0 * self.initial_loss / (eta * self.steps)
            holds = mean_sq <= bound
        return SmoothnessReport(
            L=L,
            eta=eta,
            eta_within_descent=eta <= 1.0 / L,
            mean_sq_grad=mean_sq,
            telescoping_bound=bound,
            telescoping_holds=holds,
        )

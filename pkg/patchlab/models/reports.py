"""
Report models written to the run directory as JSON.
"""

from typing import Any

from pydantic import BaseModel, Field

from patchlab.models.common import BaseReport, ClauseResult
from patchlab.models.enums import FeatureTier, StopReason, TrainingMethod


# Decomposition Reports
class EInitReport(BaseReport):
    """Every clause of the initialization event evaluated on one realization."""

    clauses: list[ClauseResult] = Field(..., description="Checked inequalities")
    d: int = Field(..., description="Patch dimension")
    n: int = Field(..., description="Training samples")

    @property
    def failed(self) -> list[str]:
        return [c.name for c in self.clauses if not c.passed]

    def clause(self, name: str) -> ClauseResult:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)


class CoeffTableModel(BaseModel):
    """Serialized feature-noise decomposition coefficients."""

    step: int | None = Field(None, description="Training step the table belongs to")
    m: int = Field(..., description="Neurons per sign")
    K: int = Field(..., description="Features per class")
    n: int = Field(..., description="Training samples")
    P: int = Field(..., description="Patches per sample")
    gamma: list[Any] = Field(..., description="gamma[s][neuron][s'][k], signs ordered (+1, -1)")
    rho: list[Any] = Field(..., description="rho[s][neuron][i][p]; zero at the feature patch")
    residual_norm: float = Field(0.0, description="Projection residual")
    source: str = Field(..., description="'projection' or 'recursion'")


class ApproxErrorReport(BaseReport):
    """Measured gaps between inner products and their coefficient approximations."""

    feature_gap_own: float = Field(..., description="max |<w_s, v_{s,k}> - gamma_s(s,k)|")
    feature_gap_cross: float = Field(..., description="max |<w_s, v_{-s,k}> + gamma_s(-s,k)|")
    noise_gap_own: float = Field(..., description="max |<w_{y_i}, xi_i^(p)> - rho_{y_i}(i,p)|")
    noise_gap_cross: float = Field(
        ..., description="max |<w_{-y_i}, xi_i^(p)> + rho_{-y_i}(i,p)|"
    )
    phi_noise_gap_own: float = Field(
        ..., description="max |phi(<w_{y_i}, xi_i^(p)>) - phi(rho_{y_i}(i,p))|"
    )
    threshold: float = Field(..., description="Empirical reporting threshold on feature gaps")

    @property
    def max_feature_gap(self) -> float:
        return max(self.feature_gap_own, self.feature_gap_cross)


# Evaluation Reports
class TierAccuracy(BaseModel):
    """Conditional test accuracy on one feature tier."""

    tier: FeatureTier = Field(..., description="Feature tier")
    n: int = Field(..., description="Test points in the tier")
    correct: int = Field(..., description="Correctly classified points")
    rate: float = Field(..., description="Conditional accuracy")
    ci_low: float = Field(..., description="Wilson interval lower end")
    ci_high: float = Field(..., description="Wilson interval upper end")


class AccuracyReport(BaseReport):
    """Train, augmented and test accuracy of one set of weights."""

    method: TrainingMethod | None = Field(None, description="Method that produced the weights")
    train_acc: float | None = Field(None, description="Training accuracy")
    aug_acc: float | None = Field(None, description="Accuracy over all Cutout-masked points")
    test_acc: float = Field(..., description="Fresh-sample accuracy")
    test_ci_low: float = Field(..., description="Wilson interval lower end")
    test_ci_high: float = Field(..., description="Wilson interval upper end")
    conditional: list[TierAccuracy] = Field(..., description="Per-tier conditional accuracy")
    n_test: int = Field(..., description="Fresh test draws")
    seed: int = Field(..., description="Test RNG seed")

    def tier(self, tier: FeatureTier) -> TierAccuracy:
        for row in self.conditional:
            if row.tier == tier:
                return row
        raise KeyError(tier)


# Theory Reports
class GlobalMin(BaseModel):
    """Positive root (z1*, z-1*) of the CutMix stationarity system."""

    z1_star: float = Field(..., gt=0, description="Per-patch contribution for label +1")
    zm1_star: float = Field(..., gt=0, description="Per-patch contribution for label -1")
    residual_g1: float = Field(..., description="|g_1(z1*, z-1*)|")
    residual_gm1: float = Field(..., description="|g_-1(z1*, z-1*)|")
    iterations: int = Field(..., description="Outer bisection iterations")
    n_pos: int = Field(..., description="|V_1|")
    n_neg: int = Field(..., description="|V_-1|")
    P: int = Field(..., description="Patches per sample")

    def z_star(self, s: int) -> float:
        return self.z1_star if s == 1 else self.zm1_star


class UniformMinimumReport(BaseReport):
    """How close trained CutMix weights are to the uniform global minimum."""

    max_deviation: float = Field(..., description="max_{i,p} |y_i z_i^(p) - z*_{y_i}|")
    relative_deviation: float = Field(..., description="max deviation divided by z*_{y_i}")
    grad_h_norm: float = Field(..., description="||grad h(Z(W))||")
    C1: float = Field(..., description="Implied constant for label +1 (equals z1*)")
    Cm1: float = Field(..., description="Implied constant for label -1 (equals z-1*)")
    band: float = Field(..., description="Empirical relative band")


class SmoothnessReport(BaseModel):
    """Descent-lemma bookkeeping of a CutMix run."""

    L: float = Field(..., description="Smoothness constant 9 r^-1 P sigma_d^2 d")
    eta: float = Field(..., description="Learning rate used")
    eta_within_descent: bool = Field(..., description="eta <= 1/L")
    mean_sq_grad: float = Field(..., description="(1/T) sum_{t<T} ||grad L(W^(t))||^2")
    telescoping_bound: float | None = Field(None, description="2 L(W^(0)) / (eta T)")
    telescoping_holds: bool | None = Field(None, description="Whether the bound held")


class CutMixTheoryReport(BaseModel):
    """Everything theory.json holds for a CutMix run."""

    global_min: GlobalMin
    uniform: UniformMinimumReport
    smoothness: SmoothnessReport
    t_cutmix: int | None = Field(None, description="First logged step below grad tolerance")
    grad_tol: float | None = Field(None, description="Configured gradient tolerance")


# Experiment Reports
class MethodSummary(BaseModel):
    """Headline numbers of one trained method."""

    method: TrainingMethod
    stop_reason: StopReason
    t_stop: int
    final_loss: float
    final_grad_norm: float
    train_acc: float
    aug_acc: float | None = None
    test_acc: float
    feature_outputs: dict[str, float] = Field(default_factory=dict)
    coefficients_monotone: bool | None = Field(
        None, description="Every gamma and rho non-decreasing over all steps"
    )
    min_gamma_increment: float | None = None
    min_rho_increment: float | None = None
    decomposition_agreement: float | None = Field(
        None, description="Max relative gap between recursive and projected coefficients"
    )
    projection_residual: float | None = None


class ExperimentSummary(BaseReport):
    """Top-level summary.json of a run directory."""

    out_dir: str
    threads: int
    methods: list[MethodSummary]
    einit_passed: bool
    einit_failed: list[str] = Field(default_factory=list)
    failures: list[str] = Field(
        default_factory=list, description="Failed run checks as <scope>:<check>"
    )

    def method(self, method: TrainingMethod) -> MethodSummary | None:
        for summary in self.methods:
            if summary.method == method:
                return summary
        return None


class TheoremCheckReport(BaseReport):
    """PASS/FAIL per theorem clause for a run directory."""

    run_dir: str
    clauses: list[ClauseResult]

    def table(self) -> str:
        """Human-readable fixed-width table."""
        width = max([len(c.name) for c in self.clauses] + [6])
        lines = [f"{'clause'.ljust(width)}  status  measured      expected"]
        for c in self.clauses:
            measured = "-" if c.measured is None else f"{c.measured:.6g}"
            lines.append(
                f"{c.name.ljust(width)}  {c.status.value.ljust(6)}  {measured.ljust(12)}  "
                f"{c.inequality}"
            )
        return "\n".join(lines)


class DryRunReport(BaseModel):
    """Derived quantities printed by `run --dry-run`."""

    cut_sets: int | None = Field(None, description="binom(P, C) Cutout masks")
    cutmix_subsets: int = Field(..., description="2^P CutMix subsets")
    pair_count: int = Field(..., description="n^2 CutMix pairs")
    predicted_test_accuracy: dict[str, float] = Field(..., description="Theorem formulas")
    smoothness_constant: float = Field(..., description="9 r^-1 P sigma_d^2 d")
    descent_step: float = Field(..., description="1/L")
    expected_global_min: GlobalMin | None = Field(
        None, description="Solution for balanced classes of size n/2"
    )
    methods: list[str]

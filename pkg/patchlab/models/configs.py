"""
Configuration models for data generation, the network, training and evaluation.
"""

import logging
import math

from pydantic import BaseModel, Field, field_validator, model_validator

from patchlab.models.enums import FeatureTier, TrainingMethod

logger = logging.getLogger(__name__)

RHO_SUM_TOLERANCE = 1e-12


class DataConfig(BaseModel):
    """Parameters of the feature-noise patch distribution and the training set size."""

    d: int = Field(..., ge=1, description="Patch dimension")
    n: int = Field(..., ge=1, description="Number of training samples")
    P: int = Field(..., ge=2, description="Patches per sample")
    K: int = Field(..., ge=1, description="Features per class")
    tiers: list[FeatureTier] = Field(..., description="Frequency tier of each feature index k")
    rho: list[float] = Field(..., description="Feature frequencies rho_1..rho_K")
    sigma_d: float = Field(..., gt=0, description="Dominant noise standard deviation")
    sigma_b: float = Field(..., gt=0, description="Background noise standard deviation")
    alpha: float = Field(..., gt=0, lt=1, description="Feature-noise strength")
    seed: int = Field(default=0, ge=0, description="Dataset RNG seed")

    @field_validator("rho")
    @classmethod
    def validate_rho(cls, v: list[float]) -> list[float]:
        """Frequencies must be probabilities summing to one, in non-increasing order."""
        if any(p < 0 for p in v):
            raise ValueError(f"rho entries must be non-negative, got {v}")
        if abs(math.fsum(v) - 1.0) > RHO_SUM_TOLERANCE:
            raise ValueError(f"rho must sum to 1 within {RHO_SUM_TOLERANCE}, got {math.fsum(v)!r}")
        if any(a < b for a, b in zip(v, v[1:], strict=False)):
            raise ValueError(f"rho must be non-increasing, got {v}")
        return v

    @model_validator(mode="after")
    def validate_shapes(self) -> "DataConfig":
        """Cross-field invariants."""
        if len(self.rho) != self.K:
            raise ValueError(f"rho has {len(self.rho)} entries, expected K={self.K}")
        if len(self.tiers) != self.K:
            raise ValueError(f"tiers has {len(self.tiers)} entries, expected K={self.K}")
        if self.sigma_b >= self.sigma_d:
            raise ValueError(
                f"sigma_b must be smaller than sigma_d, got {self.sigma_b} >= {self.sigma_d}"
            )
        if self.d < 2 * self.K:
            raise ValueError(f"d={self.d} cannot hold 2K={2 * self.K} orthonormal features")
        return self

    def tier_indices(self, tier: FeatureTier) -> list[int]:
        """Zero-based feature indices belonging to a tier."""
        return [k for k, t in enumerate(self.tiers) if t == tier]

    def tier_mass(self, *tiers: FeatureTier) -> float:
        """Total frequency of the given tiers."""
        return math.fsum(self.rho[k] for k, t in enumerate(self.tiers) if t in tiers)


class ActivationParams(BaseModel):
    """Smoothed leaky ReLU parameters."""

    beta: float = Field(default=0.1, ge=0, le=1, description="Negative slope")
    r: float = Field(default=1.0, gt=0, description="Length of the quadratic smoothing interval")

    @model_validator(mode="after")
    def flag_dead_neurons(self) -> "ActivationParams":
        """beta = 0 is the smoothed ReLU; allowed but neurons can die."""
        if self.beta == 0:
            logger.warning(
                "beta=0 selects the smoothed ReLU; neurons may stop receiving gradient",
                extra={"beta": self.beta, "r": self.r},
            )
        return self


class InitConfig(BaseModel):
    """Gaussian initialization of the first-layer filters."""

    sigma_0: float = Field(default=0.01, gt=0, description="Initialization standard deviation")
    seed: int = Field(default=1, ge=0, description="Initialization RNG seed")


class ModelConfig(BaseModel):
    """Network shape: neurons per sign plus activation and initialization."""

    m: int = Field(default=1, ge=1, description="Neurons per output sign")
    activation: ActivationParams = Field(default_factory=ActivationParams)
    init: InitConfig = Field(default_factory=InitConfig)


class TrainConfig(BaseModel):
    """Full-batch gradient descent settings for one method."""

    method: TrainingMethod = Field(..., description="Training objective")
    eta: float = Field(default=1.0, ge=0, description="Learning rate")
    T: int = Field(default=1000, ge=0, description="Iteration budget")
    C: int = Field(default=1, ge=0, description="Cutout size (Cutout only)")
    log_every: int = Field(default=10, ge=1, description="Trace stride")
    grad_tol: float | None = Field(
        default=None, gt=0, description="Stop once the gradient norm drops to this value"
    )
    track_coefficients: bool = Field(
        default=True, description="Run the coefficient recursions alongside training"
    )


class EvalConfig(BaseModel):
    """Test-time evaluation settings."""

    n_test: int = Field(default=20_000, ge=1, description="Fresh test draws")
    seed: int = Field(default=2, ge=0, description="Test RNG seed")
    trace_test_samples: int = Field(
        default=0, ge=0, description="Size of the fixed test set scored at logged steps"
    )


class OutputConfig(BaseModel):
    """Where and what to emit."""

    directory: str = Field(default="runs/experiment", description="Run output directory")
    plots: bool = Field(default=True, description="Render SVG plots")


class ExperimentConfig(BaseModel):
    """A full experiment: data, model, one or more trainers, evaluation and output."""

    data: DataConfig
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: list[TrainConfig] = Field(..., min_length=1)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def validate_trainers(self) -> "ExperimentConfig":
        """One trainer per method; Cutout size must satisfy 1 <= C < P/2."""
        methods = [t.method for t in self.train]
        if len(set(methods)) != len(methods):
            raise ValueError(f"duplicate training methods: {[m.value for m in methods]}")
        for trainer in self.train:
            if trainer.method == TrainingMethod.CUTOUT and not (
                1 <= trainer.C and 2 * trainer.C < self.data.P
            ):
                raise ValueError(
                    f"cutout size C={trainer.C} must satisfy 1 <= C < P/2 with P={self.data.P}"
                )
        return self

    def trainer(self, method: TrainingMethod) -> TrainConfig | None:
        """Return the trainer for a method, if configured."""
        for trainer in self.train:
            if trainer.method == method:
                return trainer
        return None

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Derive all seeds from one base seed: data = S, init = S + 1, eval = S + 2."""
        return self.model_copy(
            update={
                "data": self.data.model_copy(update={"seed": seed}),
                "model": self.model.model_copy(
                    update={"init": self.model.init.model_copy(update={"seed": seed + 1})}
                ),
                "eval": self.eval.model_copy(update={"seed": seed + 2}),
            }
        )

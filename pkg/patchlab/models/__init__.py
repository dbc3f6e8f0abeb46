"""
Pydantic models for configs and reports.
"""

from patchlab.models.common import BaseReport, ClauseResult, ErrorDetail, ErrorResponse
from patchlab.models.configs import (
    ActivationParams,
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    InitConfig,
    ModelConfig,
    OutputConfig,
    TrainConfig,
)
from patchlab.models.enums import (
    ClauseStatus,
    FeatureTier,
    StopReason,
    TrainingMethod,
)
from patchlab.models.reports import (
    AccuracyReport,
    ApproxErrorReport,
    CoeffTableModel,
    CutMixTheoryReport,
    DryRunReport,
    EInitReport,
    ExperimentSummary,
    GlobalMin,
    MethodSummary,
    SmoothnessReport,
    TheoremCheckReport,
    TierAccuracy,
    UniformMinimumReport,
)

__all__ = [
    "AccuracyReport",
    "ActivationParams",
    "ApproxErrorReport",
    "BaseReport",
    "ClauseResult",
    "ClauseStatus",
    "CoeffTableModel",
    "CutMixTheoryReport",
    "DataConfig",
    "DryRunReport",
    "EInitReport",
    "ErrorDetail",
    "ErrorResponse",
    "EvalConfig",
    "ExperimentConfig",
    "ExperimentSummary",
    "FeatureTier",
    "GlobalMin",
    "InitConfig",
    "MethodSummary",
    "ModelConfig",
    "OutputConfig",
    "SmoothnessReport",
    "StopReason",
    "TheoremCheckReport",
    "TierAccuracy",
    "TrainConfig",
    "TrainingMethod",
    "UniformMinimumReport",
]

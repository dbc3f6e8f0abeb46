"""
Enumeration types for patchlab.
"""

from enum import Enum


class TrainingMethod(str, Enum):
    """Training objective."""

    ERM = "erm"
    CUTOUT = "cutout"
    CUTMIX = "cutmix"


class FeatureTier(str, Enum):
    """Frequency tier of a feature index k."""

    COMMON = "common"
    RARE = "rare"
    EXTREME = "extreme"


class ClauseStatus(str, Enum):
    """Outcome of a checked inequality or theorem clause."""

    PASS = "PASS"
    FAIL = "FAIL"
    NOT_APPLICABLE = "N/A"


class StopReason(str, Enum):
    """Why a training run ended."""

    BUDGET = "budget"
    GRAD_TOL = "grad_tol"

"""
Service layer: experiment orchestration, theorem checks, storage and plots.
"""

from patchlab.services.experiment_service import ExperimentService, get_experiment_service
from patchlab.services.plot_service import PlotService, get_plot_service
from patchlab.services.storage_service import RunNotFoundError, RunStorage
from patchlab.services.theorem_service import TheoremCheckService, get_theorem_service

__all__ = [
    "ExperimentService",
    "PlotService",
    "RunNotFoundError",
    "RunStorage",
    "TheoremCheckService",
    "get_experiment_service",
    "get_plot_service",
    "get_theorem_service",
]

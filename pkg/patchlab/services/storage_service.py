"""
Storage service for run directories.
"""

import csv
import json
import logging
from pathlib import Path

from pydantic import BaseModel

from patchlab.core.decompose import CoeffTable, iter_coefficient_rows
from patchlab.core.model import Weights, save_weights
from patchlab.core.synthdata import Dataset, save_dataset
from patchlab.core.train import TraceLog
from patchlab.errors import PatchLabError
from patchlab.models.enums import TrainingMethod
from patchlab.models.reports import (
    AccuracyReport,
    CutMixTheoryReport,
    EInitReport,
    ExperimentSummary,
)

logger = logging.getLogger(__name__)

COEFFICIENT_HEADER = ["t", "kind", "s", "neuron", "a", "b", "value"]
CONDITIONAL_HEADER = ["tier", "n", "correct", "rate", "ci_low", "ci_high"]


class RunNotFoundError(PatchLabError):
    """Raised when a directory holds no readable run."""

    def __init__(self, message: str):
        super().__init__(message, "RUN_NOT_FOUND")


class RunStorage:
    """
    Layout of one run directory.

    Top-level files (config.cfg, einit.json, dataset.npz, summary.json,
    figure1.svg, run.log) sit next to one subdirectory per trained method.
    """

    def __init__(self, root: Path):
        """
        Initialize storage rooted at a run directory.

        Args:
            root: The run directory; created on demand.
        """
        self._root = root

    @property
    def root(self) -> Path:
        return self._root

    def ensure(self) -> Path:
        self._root.mkdir(parents=True, exist_ok=True)
        return self._root

    def method_dir(self, method: TrainingMethod) -> Path:
        return self._root / method.value

    # Paths

    @property
    def config_path(self) -> Path:
        return self._root / "config.cfg"

    @property
    def summary_path(self) -> Path:
        return self._root / "summary.json"

    @property
    def log_path(self) -> Path:
        return self._root / "run.log"

    @property
    def figure_path(self) -> Path:
        return self._root / "figure1.svg"

    @property
    def theorem_check_path(self) -> Path:
        return self._root / "theorem_check.json"

    @property
    def error_path(self) -> Path:
        return self._root / "error.json"

    # Writers

    def write_text(self, name: str, text: str) -> Path:
        path = self.ensure() / name
        path.write_text(text, encoding="utf-8")
        return path

    def write_model(self, path: Path, model: BaseModel) -> Path:
        """Write a pydantic model as indented JSON."""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(model.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    def write_json(self, path: Path, payload: dict) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def write_dataset(self, dataset: Dataset) -> Path:
        return save_dataset(dataset, self.ensure() / "dataset.npz")

    def write_einit(self, report: EInitReport) -> Path:
        return self.write_model(self._root / "einit.json", report)

    def write_summary(self, summary: ExperimentSummary) -> Path:
        return self.write_model(self.summary_path, summary)

    def write_trace(self, method: TrainingMethod, trace: TraceLog) -> Path:
        return trace.write_csv(self.method_dir(method) / "trace.csv")

    def write_coefficients(
        self, method: TrainingMethod, history: list[CoeffTable], dataset: Dataset
    ) -> Path:
        """Long-format coefficient trace over all logged steps."""
        path = self.method_dir(method) / "coefficients.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(COEFFICIENT_HEADER)
            for table in history:
                for kind, s, neuron, a, b, value in iter_coefficient_rows(table, dataset):
                    writer.writerow([table.step, kind, s, neuron, a, b, repr(value)])
        return path

    def write_coeff_table(self, method: TrainingMethod, table: CoeffTable, source: str) -> Path:
        path = self.method_dir(method) / "coeff_table.json"
        return self.write_model(path, table.to_model(source))

    def write_accuracy(self, method: TrainingMethod, report: AccuracyReport) -> Path:
        """accuracy.json plus the conditional-accuracy table as CSV."""
        base = self.method_dir(method)
        self.write_model(base / "accuracy.json", report)
        path = base / "conditional_accuracy.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CONDITIONAL_HEADER)
            for row in report.conditional:
                writer.writerow(
                    [
                        row.tier.value,
                        row.n,
                        row.correct,
                        repr(row.rate),
                        repr(row.ci_low),
                        repr(row.ci_high),
                    ]
                )
        return path

    def write_approx_error(self, method: TrainingMethod, report: BaseModel) -> Path:
        return self.write_model(self.method_dir(method) / "approx_error.json", report)

    def write_theory(self, method: TrainingMethod, report: CutMixTheoryReport) -> Path:
        return self.write_model(self.method_dir(method) / "theory.json", report)

    def write_weights(self, method: TrainingMethod, W: Weights, name: str = "weights.bin") -> Path:
        return save_weights(W, self.method_dir(method) / name)

    # Readers

    def has_run(self) -> bool:
        return self.summary_path.is_file()

    def read_summary(self) -> ExperimentSummary:
        """
        Load summary.json.

        Raises:
            RunNotFoundError: If the directory holds no summary.
        """
        if not self.has_run():
            raise RunNotFoundError(f"no runs found in {self._root}")
        return ExperimentSummary.model_validate_json(self.summary_path.read_text())

    def read_accuracy(self, method: TrainingMethod) -> AccuracyReport | None:
        path = self.method_dir(method) / "accuracy.json"
        if not path.is_file():
            return None
        return AccuracyReport.model_validate_json(path.read_text())

    def read_theory(self, method: TrainingMethod) -> CutMixTheoryReport | None:
        path = self.method_dir(method) / "theory.json"
        if not path.is_file():
            return None
        return CutMixTheoryReport.model_validate_json(path.read_text())

    def read_einit(self) -> EInitReport | None:
        path = self._root / "einit.json"
        if not path.is_file():
            return None
        return EInitReport.model_validate_json(path.read_text())

    def read_trace(self, method: TrainingMethod) -> TraceLog | None:
        path = self.method_dir(method) / "trace.csv"
        if not path.is_file():
            return None
        return TraceLog.read_csv(path)

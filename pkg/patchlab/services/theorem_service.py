"""
Theorem check: PASS/FAIL per theorem clause for a finished run directory.
"""

import logging
from pathlib import Path

from patchlab.core.evaluation import predicted_test_accuracy, unlearned_tiers
from patchlab.core.theory import RESIDUAL_TOL
from patchlab.models.common import ClauseResult
from patchlab.models.configs import ExperimentConfig
from patchlab.models.enums import ClauseStatus, TrainingMethod
from patchlab.models.reports import (
    AccuracyReport,
    CutMixTheoryReport,
    MethodSummary,
    TheoremCheckReport,
)
from patchlab.services.storage_service import RunNotFoundError, RunStorage
from patchlab.utils.config_file import load_config

logger = logging.getLogger(__name__)

# Empirical acceptance bands at fixed scale.
TEST_ACCURACY_BAND = {TrainingMethod.ERM: 0.03, TrainingMethod.CUTOUT: 0.02}
CUTMIX_TEST_FLOOR = 0.99
CHANCE_BAND = 0.04
PERFECT = 1.0


def _check(
    name: str, inequality: str, measured: float | None, bound: float, margin: float | None
) -> ClauseResult:
    if measured is None or margin is None:
        return ClauseResult(name=name, inequality=inequality, status=ClauseStatus.NOT_APPLICABLE)
    return ClauseResult(
        name=name,
        inequality=inequality,
        status=ClauseStatus.PASS if margin >= 0 else ClauseStatus.FAIL,
        measured=measured,
        bound=bound,
        margin=margin,
    )


def _flag(name: str, inequality: str, value: bool | None) -> ClauseResult:
    if value is None:
        return ClauseResult(name=name, inequality=inequality, status=ClauseStatus.NOT_APPLICABLE)
    return ClauseResult(
        name=name,
        inequality=inequality,
        status=ClauseStatus.PASS if value else ClauseStatus.FAIL,
        measured=float(value),
        bound=1.0,
    )


class TheoremCheckService:
    """Evaluates theorem clauses against the files of a run directory."""

    def check(self, run_dir: Path) -> TheoremCheckReport:
        """
        Check every clause that applies to the methods found in a run directory.

        Args:
            run_dir: Directory written by ExperimentService.run.

        Returns:
            TheoremCheckReport, also written to theorem_check.json.

        Raises:
            RunNotFoundError: If the directory holds no run.
        """
        storage = RunStorage(run_dir)
        if not run_dir.is_dir() or not storage.has_run() or not storage.config_path.is_file():
            raise RunNotFoundError(f"no runs found in {run_dir}")

        summary = storage.read_summary()
        config = load_config(storage.config_path)
        einit = storage.read_einit()
        einit_failed = einit.failed if einit is not None else summary.einit_failed
        inequality = "every initialization clause holds"
        if einit_failed:
            inequality += f" (failed: {', '.join(einit_failed)})"
        clauses = [_flag("einit", inequality, not einit_failed)]
        for method_summary in summary.methods:
            method = method_summary.method
            accuracy = storage.read_accuracy(method)
            clauses.extend(self._accuracy_clauses(method_summary, accuracy, config))
            if method == TrainingMethod.CUTMIX:
                clauses.extend(self._cutmix_clauses(method_summary, storage.read_theory(method)))
            else:
                clauses.append(
                    _flag(
                        f"{method.value}_coefficients_monotone",
                        "gamma and rho non-decreasing at every step",
                        method_summary.coefficients_monotone,
                    )
                )

        failed = [c.name for c in clauses if c.status == ClauseStatus.FAIL]
        report = TheoremCheckReport(
            success=not failed,
            message="all clauses hold" if not failed else f"failed: {', '.join(failed)}",
            run_dir=str(run_dir),
            clauses=clauses,
        )
        storage.write_model(storage.theorem_check_path, report)
        logger.info(
            f"Theorem check of {run_dir}: {len(failed)} failed of {len(clauses)}",
            extra={"failed": failed},
        )
        return report

    def _accuracy_clauses(
        self,
        summary: MethodSummary,
        accuracy: AccuracyReport | None,
        config: ExperimentConfig,
    ) -> list[ClauseResult]:
        method = summary.method
        prefix = method.value
        clauses = [
            _check(
                f"{prefix}_train_fit",
                "train accuracy = 1",
                summary.train_acc,
                PERFECT,
                summary.train_acc - PERFECT,
            )
        ]
        if method == TrainingMethod.CUTOUT:
            aug = summary.aug_acc
            clauses.append(
                _check(
                    f"{prefix}_augmented_fit",
                    "accuracy on every Cutout-masked training point = 1",
                    aug,
                    PERFECT,
                    None if aug is None else aug - PERFECT,
                )
            )

        if method == TrainingMethod.CUTMIX:
            clauses.append(
                _check(
                    f"{prefix}_test_accuracy",
                    f"test accuracy >= {CUTMIX_TEST_FLOOR}",
                    summary.test_acc,
                    CUTMIX_TEST_FLOOR,
                    summary.test_acc - CUTMIX_TEST_FLOOR,
                )
            )
        else:
            predicted = predicted_test_accuracy(method, config.data)
            band = TEST_ACCURACY_BAND[method]
            clauses.append(
                _check(
                    f"{prefix}_test_accuracy",
                    f"|test accuracy - {predicted:.4f}| <= {band}",
                    summary.test_acc,
                    predicted,
                    band - abs(summary.test_acc - predicted),
                )
            )

        tiers = unlearned_tiers(method)
        if tiers and accuracy is not None:
            rows = [row for row in accuracy.conditional if row.tier in tiers]
            total = sum(row.n for row in rows)
            rate = sum(row.correct for row in rows) / total if total else None
            clauses.append(
                _check(
                    f"{prefix}_unlearned_random",
                    f"|accuracy on {'/'.join(t.value for t in tiers)} - 0.5| <= {CHANCE_BAND}",
                    rate,
                    0.5,
                    None if rate is None else CHANCE_BAND - abs(rate - 0.5),
                )
            )
        return clauses

    def _cutmix_clauses(
        self, summary: MethodSummary, theory: CutMixTheoryReport | None
    ) -> list[ClauseResult]:
        monotone = summary.coefficients_monotone
        clauses = [
            _flag(
                "cutmix_non_monotone",
                "some coefficient decreases during training",
                None if monotone is None else not monotone,
            )
        ]
        if theory is None:
            return clauses

        gm = theory.global_min
        residual = max(gm.residual_g1, gm.residual_gm1)
        clauses.append(
            _check(
                "cutmix_global_min_residual",
                f"|g_1|, |g_-1| <= {RESIDUAL_TOL}",
                residual,
                RESIDUAL_TOL,
                RESIDUAL_TOL - residual,
            )
        )
        uniform = theory.uniform
        clauses.append(
            _check(
                "cutmix_uniform_minimum",
                f"max |y_i z_i^(p) - z*_(y_i)| / z* <= {uniform.band}",
                uniform.relative_deviation,
                uniform.band,
                uniform.band - uniform.relative_deviation,
            )
        )
        tol = theory.grad_tol
        clauses.append(
            _check(
                "cutmix_near_stationary",
                f"||grad L_CutMix|| <= {tol} at the last logged step",
                summary.final_grad_norm if tol is not None else None,
                tol if tol is not None else 0.0,
                None if tol is None else tol - summary.final_grad_norm,
            )
        )
        smooth = theory.smoothness
        clauses.append(
            _flag(
                "cutmix_telescoping_bound",
                "(1/T) sum ||grad L||^2 <= 2 L(W^(0)) / (eta T), given eta <= 1/L",
                smooth.telescoping_holds if smooth.eta_within_descent else None,
            )
        )
        return clauses


_theorem_service: TheoremCheckService | None = None


def get_theorem_service() -> TheoremCheckService:
    """Get the theorem check service singleton."""
    global _theorem_service
    if _theorem_service is None:
        _theorem_service = TheoremCheckService()
    return _theorem_service

"""
Experiment service: generate data, train every configured method, evaluate and
write the run directory.
"""

import logging
import math
from pathlib import Path

import numpy as np

from patchlab.config import Settings, get_settings
from patchlab.core.decompose import (
    CoefficientProjector,
    ProjectionRecorder,
    approx_error_audit,
    check_e_init,
)
from patchlab.core.evaluation import feature_output_trace, predicted_test_accuracy, test_accuracy
from patchlab.core.model import Weights, init_weights
from patchlab.core.synthdata import Dataset, generate_dataset, sample_test_batch
from patchlab.core.theory import (
    GradientNormAccumulator,
    SolverError,
    smoothness_constant,
    solve_global_minimum,
    verify_uniform_minimum,
)
from patchlab.core.train import TrainingDivergedError, TrainingHook, TrainingResult, run_training
from patchlab.errors import PatchLabError
from patchlab.models.configs import ExperimentConfig, TrainConfig
from patchlab.models.enums import TrainingMethod
from patchlab.models.reports import (
    CutMixTheoryReport,
    DryRunReport,
    EInitReport,
    ExperimentSummary,
    MethodSummary,
)
from patchlab.services.plot_service import get_plot_service
from patchlab.services.storage_service import RunStorage
from patchlab.utils.cache import DatasetCache
from patchlab.utils.config_file import serialize_config

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
EINIT_FRESH_DRAWS = 100
TRACE_TEST_SPAWN_KEY = (1, 0)
FRESH_NOISE_SPAWN_KEY = (2, 0)
DECOMPOSITION_AGREEMENT_TOL = 1e-6
MONOTONE_METHODS = (TrainingMethod.ERM, TrainingMethod.CUTOUT)


class RunFailedError(PatchLabError):
    """Raised when a finished run misses one of its own consistency checks."""

    def __init__(self, message: str, failures: list[str]):
        super().__init__(message, "RUN_FAILED", {"failures": failures})
        self.failures = failures


def _spawned_rng(seed: int, key: tuple[int, ...]) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


def run_failures(einit: EInitReport, methods: list[MethodSummary]) -> list[str]:
    """
    Names of the checks a finished run misses.

    The initialization event must hold, ERM and Cutout coefficients must never
    decrease, and recursive and projected coefficients must agree to
    DECOMPOSITION_AGREEMENT_TOL.
    """
    failures = [f"einit:{name}" for name in einit.failed]
    for summary in methods:
        name = summary.method.value
        if summary.method in MONOTONE_METHODS and summary.coefficients_monotone is False:
            failures.append(f"{name}:coefficients_monotone")
        agreement = summary.decomposition_agreement
        if agreement is not None and not agreement <= DECOMPOSITION_AGREEMENT_TOL:
            failures.append(f"{name}:decomposition_agreement")
    return failures


class ExperimentService:
    """
    Runs experiments end to end.

    Methods are trained one after another from the same W^(0); each owns its
    subdirectory of the run directory.
    """

    def __init__(self, settings: Settings | None = None, cache: DatasetCache | None = None):
        """
        Initialize experiment service.

        Args:
            settings: Process settings.
            cache: Dataset cache; defaults to one under settings.cache_dir.
        """
        self._settings = settings or get_settings()
        self._cache = cache

    @property
    def cache(self) -> DatasetCache:
        if self._cache is None:
            self._cache = DatasetCache(self._settings.cache_dir)
        return self._cache

    # Dry run

    def dry_run(self, config: ExperimentConfig) -> DryRunReport:
        """
        Derived quantities of a config, without generating data or training.

        Args:
            config: Validated experiment config.

        Returns:
            DryRunReport.
        """
        data = config.data
        cutout = config.trainer(TrainingMethod.CUTOUT)
        L = smoothness_constant(config.model.activation, data)
        try:
            n_pos = max(1, data.n // 2)
            expected = solve_global_minimum(n_pos, max(1, data.n - n_pos), data.P)
        except SolverError as e:
            logger.warning(f"No balanced global minimum for this config: {e.message}")
            expected = None
        return DryRunReport(
            cut_sets=math.comb(data.P, cutout.C) if cutout else None,
            cutmix_subsets=2**data.P,
            pair_count=data.n**2,
            predicted_test_accuracy={
                t.method.value: predicted_test_accuracy(t.method, data) for t in config.train
            },
            smoothness_constant=L,
            descent_step=1.0 / L,
            expected_global_min=expected,
            methods=[t.method.value for t in config.train],
        )

    # Full run

    def run(
        self,
        config: ExperimentConfig,
        out_dir: Path,
        threads: int = 1,
        plots: bool = True,
    ) -> ExperimentSummary:
        """
        Run an experiment and write its run directory.

        Args:
            config: Validated experiment config.
            out_dir: Run directory; created if missing.
            threads: Worker threads for the CutMix pair loop and test evaluation.
            plots: Whether to render figure1.svg.

        Returns:
            The summary also written to summary.json.

        Raises:
            TrainingDivergedError: With checkpoint_path set to the saved last-good weights.
        """
        storage = RunStorage(out_dir)
        storage.ensure()
        handler = logging.FileHandler(storage.log_path, mode="w", encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logging.getLogger().addHandler(handler)
        try:
            return self._run(config, storage, threads, plots)
        finally:
            logging.getLogger().removeHandler(handler)
            handler.close()

    def _run(
        self, config: ExperimentConfig, storage: RunStorage, threads: int, plots: bool
    ) -> ExperimentSummary:
        logger.info(
            f"Starting experiment in {storage.root}",
            extra={"methods": [t.method.value for t in config.train], "threads": threads},
        )
        storage.write_text("config.cfg", serialize_config(config))

        dataset = self.cache.get_or_create(config.data, generate_dataset)
        storage.write_dataset(dataset)
        W0 = init_weights(dataset.d, config.model.m, config.model.init, config.model.activation)

        einit = check_e_init(
            dataset,
            W0,
            fresh_draws=EINIT_FRESH_DRAWS,
            rng=_spawned_rng(config.eval.seed, FRESH_NOISE_SPAWN_KEY),
        )
        storage.write_einit(einit)

        trace_test = None
        if config.eval.trace_test_samples:
            trace_test = sample_test_batch(
                dataset.bank,
                config.data,
                _spawned_rng(config.eval.seed, TRACE_TEST_SPAWN_KEY),
                config.eval.trace_test_samples,
            )

        projector = (
            CoefficientProjector(dataset)
            if any(t.track_coefficients for t in config.train)
            else None
        )

        summaries = []
        traces = {}
        for trainer in config.train:
            method_summary, result = self._train_method(
                config, trainer, dataset, W0, projector, trace_test, storage, threads
            )
            summaries.append(method_summary)
            traces[trainer.method] = result.trace

        if plots:
            get_plot_service().feature_panels(traces, config.data, storage.figure_path)

        failures = run_failures(einit, summaries)
        trained = ", ".join(t.method.value for t in config.train)
        summary = ExperimentSummary(
            success=not failures,
            message=f"trained {trained}"
            + (f"; failed: {', '.join(failures)}" if failures else ""),
            out_dir=str(storage.root),
            threads=threads,
            methods=summaries,
            einit_passed=einit.success,
            einit_failed=einit.failed,
            failures=failures,
        )
        storage.write_summary(summary)
        if failures:
            logger.warning(
                f"Run checks failed: {', '.join(failures)}", extra={"failures": failures}
            )
        logger.info(f"Experiment finished in {storage.root}")
        return summary

    def _train_method(
        self,
        config: ExperimentConfig,
        trainer: TrainConfig,
        dataset: Dataset,
        W0: Weights,
        projector: CoefficientProjector | None,
        trace_test: Dataset | None,
        storage: RunStorage,
        threads: int,
    ) -> tuple[MethodSummary, TrainingResult]:
        method = trainer.method
        hooks: list[TrainingHook] = []
        projections = None
        if trainer.track_coefficients and projector is not None and W0.init is not None:
            projections = ProjectionRecorder(projector, W0.init)
            hooks.append(projections)
        accumulator = GradientNormAccumulator() if method == TrainingMethod.CUTMIX else None
        if accumulator is not None:
            hooks.append(accumulator)

        try:
            result = run_training(W0, dataset, trainer, hooks, trace_test, threads)
        except TrainingDivergedError as e:
            if e.last_good is not None:
                e.checkpoint_path = storage.write_weights(method, e.last_good, "last_good.bin")
                logger.error(
                    f"{method.value} diverged; last good weights at {e.checkpoint_path}",
                    extra={"step": e.step},
                )
            raise

        W = result.weights
        storage.write_trace(method, result.trace)
        storage.write_weights(method, W)

        agreement = None
        residual = None
        if result.recorder is not None:
            storage.write_coefficients(method, result.recorder.history, dataset)
        if projections is not None and projections.history:
            final = projections.history[-1]
            residual = final.residual_norm
            storage.write_coeff_table(method, final, "projection")
            storage.write_approx_error(method, approx_error_audit(W, final, dataset))
            if result.recorder is not None:
                pairs = zip(result.recorder.history, projections.history, strict=True)
                agreement = max(rec.max_relative_gap(proj) for rec, proj in pairs)

        accuracy = test_accuracy(
            W,
            dataset.bank,
            config.data,
            config.eval.n_test,
            config.eval.seed,
            train=dataset,
            C=trainer.C if method == TrainingMethod.CUTOUT else None,
            method=method,
            threads=threads,
        )
        storage.write_accuracy(method, accuracy)

        if accumulator is not None:
            self._cutmix_theory(config, trainer, dataset, result, accumulator, storage)

        outputs = feature_output_trace(W, dataset.bank)
        feature_outputs = {
            f"v[{'+1' if si == 0 else '-1'},{k + 1}]": float(outputs[si, k])
            for si in range(2)
            for k in range(dataset.bank.K)
        }
        recorder = result.recorder
        summary = MethodSummary(
            method=method,
            stop_reason=result.stop_reason,
            t_stop=result.t_stop,
            final_loss=float(result.trace.column("loss")[-1]),
            final_grad_norm=float(result.trace.column("grad_norm")[-1]),
            train_acc=accuracy.train_acc if accuracy.train_acc is not None else float("nan"),
            aug_acc=accuracy.aug_acc,
            test_acc=accuracy.test_acc,
            feature_outputs=feature_outputs,
            coefficients_monotone=recorder.is_monotone if recorder else None,
            min_gamma_increment=recorder.min_gamma_increment if recorder else None,
            min_rho_increment=recorder.min_rho_increment if recorder else None,
            decomposition_agreement=agreement,
            projection_residual=residual,
        )
        return summary, result

    def _cutmix_theory(
        self,
        config: ExperimentConfig,
        trainer: TrainConfig,
        dataset: Dataset,
        result: TrainingResult,
        accumulator: GradientNormAccumulator,
        storage: RunStorage,
    ) -> None:
        global_min = solve_global_minimum(len(dataset.V(1)), len(dataset.V(-1)), dataset.P)
        uniform = verify_uniform_minimum(result.weights, dataset, global_min)
        L = smoothness_constant(config.model.activation, config.data)
        t_cutmix = (
            result.trace.first_below("grad_norm", trainer.grad_tol)
            if trainer.grad_tol is not None
            else None
        )
        report = CutMixTheoryReport(
            global_min=global_min,
            uniform=uniform,
            smoothness=accumulator.report(L, trainer.eta),
            t_cutmix=t_cutmix,
            grad_tol=trainer.grad_tol,
        )
        storage.write_theory(trainer.method, report)


_experiment_service: ExperimentService | None = None


def get_experiment_service() -> ExperimentService:
    """Get the experiment service singleton."""
    global _experiment_service
    if _experiment_service is None:
        _experiment_service = ExperimentService()
    return _experiment_service

"""
patchlab - command-line entry point.

    patchlab run <config> [--out DIR] [--threads N] [--dry-run] [--no-plots]
    patchlab check <run-dir>

PATCHLAB_SEED=S overrides every seed of the experiment (data S, init S+1, eval S+2).
"""

import argparse
import json
import logging
from collections.abc import Sequence
from pathlib import Path

from patchlab import __version__
from patchlab.config import Settings, get_settings
from patchlab.middleware.error_handler import EXIT_FAILED, EXIT_OK, handle_cli_errors
from patchlab.services.experiment_service import RunFailedError, get_experiment_service
from patchlab.services.theorem_service import get_theorem_service
from patchlab.utils.config_file import load_config

logger = logging.getLogger(__name__)

TEXT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
_RECORD_FIELDS = frozenset(vars(logging.makeLogRecord({})))


class JsonFormatter(logging.Formatter):
    """One JSON object per record, including fields passed through extra=."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "time": self.formatTime(record),
            "logger": record.name,
            "level": record.levelname,
            "message": record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RECORD_FIELDS and key not in payload:
                payload[key] = value
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def configure_logging(settings: Settings) -> None:
    """Configure root logging from settings."""
    handler = logging.StreamHandler()
    if settings.log_format == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))
    logging.basicConfig(level=settings.log_level, handlers=[handler], force=True)


def build_parser() -> argparse.ArgumentParser:
    """Create the argument parser."""
    parser = argparse.ArgumentParser(
        prog="patchlab",
        description="Train ERM, Cutout and CutMix on feature-noise patch data and check "
        "the predicted outcomes.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment from a config file")
    run.add_argument("config", type=Path, help="Experiment config file")
    run.add_argument("--out", type=Path, default=None, help="Run directory")
    run.add_argument("--threads", type=int, default=None, help="Worker threads")
    run.add_argument(
        "--dry-run", action="store_true", help="Validate and print derived quantities only"
    )
    run.add_argument("--no-plots", action="store_true", help="Skip SVG rendering")

    check = sub.add_parser("check", help="Check theorem clauses against a run directory")
    check.add_argument("run_dir", type=Path, help="Directory written by 'run'")
    return parser


def _run(args: argparse.Namespace, settings: Settings) -> int:
    config = load_config(args.config)
    if settings.seed is not None:
        config = config.with_seed(settings.seed)
        logger.info(f"Seeds derived from PATCHLAB_SEED={settings.seed}")

    service = get_experiment_service()
    if args.dry_run:
        print(service.dry_run(config).model_dump_json(indent=2))
        return EXIT_OK

    out_dir = args.out or settings.output_dir or Path(config.output.directory)
    if args.out is not None or settings.output_dir is not None:
        config = config.model_copy(
            update={"output": config.output.model_copy(update={"directory": str(out_dir)})}
        )
    args.out = out_dir
    threads = args.threads if args.threads is not None else settings.threads
    plots = config.output.plots and settings.plots and not args.no_plots

    summary = service.run(config, out_dir, threads=threads, plots=plots)
    for method in summary.methods:
        print(
            f"{method.method.value:7s} stop={method.stop_reason.value}@{method.t_stop} "
            f"loss={method.final_loss:.4g} train={method.train_acc:.4f} test={method.test_acc:.4f}"
        )
    if not summary.success:
        raise RunFailedError(summary.message, summary.failures)
    return EXIT_OK


def _check(args: argparse.Namespace) -> int:
    report = get_theorem_service().check(args.run_dir)
    print(report.table())
    return EXIT_OK if report.success else EXIT_FAILED


def main(argv: Sequence[str] | None = None) -> int:
    """
    Parse arguments and dispatch.

    Returns:
        Process exit code: 0 success, 1 failed clause, 2 config or input error,
        3 numerical failure, 4 unexpected error.
    """
    args = build_parser().parse_args(argv)
    settings = get_settings()
    configure_logging(settings)

    if args.command == "run":
        # _run stores the resolved run directory in args.out
        return handle_cli_errors(
            lambda: _run(args, settings), lambda: args.out or settings.output_dir
        )
    return handle_cli_errors(lambda: _check(args), args.run_dir)

"""
Exception handling at the command-line boundary.

Every command runs inside handle_cli_errors, which turns exceptions into an
ErrorResponse on stderr (and error.json in the run directory when it exists)
plus a process exit code.
"""

import logging
import sys
import traceback
from collections.abc import Callable
from pathlib import Path

from pydantic import ValidationError

from patchlab.config import get_settings
from patchlab.core.decompose import DecompositionError
from patchlab.core.model import ShapeMismatchError
from patchlab.core.synthdata import BundleFormatError, DataGenerationError
from patchlab.core.theory import HessianTooLargeError, SolverError
from patchlab.core.train import (
    EmptyDatasetError,
    InvalidCutoutSizeError,
    TrainingDivergedError,
)
from patchlab.errors import PatchLabError
from patchlab.models.common import ErrorDetail, ErrorResponse
from patchlab.services.storage_service import RunNotFoundError, RunStorage
from patchlab.utils.config_file import ConfigParseError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_UNEXPECTED = 4

INPUT_ERRORS: tuple[type[PatchLabError], ...] = (
    ConfigParseError,
    RunNotFoundError,
    BundleFormatError,
    DataGenerationError,
    InvalidCutoutSizeError,
    EmptyDatasetError,
)
NUMERICAL_ERRORS: tuple[type[PatchLabError], ...] = (
    TrainingDivergedError,
    SolverError,
    DecompositionError,
    HessianTooLargeError,
    ShapeMismatchError,
)


def exit_code_for(exc: BaseException) -> int:
    """Exit code of an exception raised by a command."""
    if isinstance(exc, INPUT_ERRORS) or isinstance(exc, ValidationError):
        return EXIT_CONFIG
    if isinstance(exc, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(exc, PatchLabError):
        return EXIT_FAILED
    return EXIT_UNEXPECTED


def error_response(exc: BaseException, run_id: str | None = None) -> ErrorResponse:
    """
    Build the diagnostic for an exception.

    Args:
        exc: The exception.
        run_id: Run directory the error belongs to.

    Returns:
        ErrorResponse with one ErrorDetail per problem.
    """
    if isinstance(exc, ValidationError):
        errors = []
        for error in exc.errors():
            field = ".".join(str(loc) for loc in error.get("loc", []))
            errors.append(
                ErrorDetail(
                    code="VALIDATION_ERROR",
                    message=error.get("msg", "Validation error"),
                    field=field if field else None,
                    details={"type": error.get("type")},
                )
            )
        return ErrorResponse(message="Settings validation failed", errors=errors, run_id=run_id)

    if isinstance(exc, PatchLabError):
        details = dict(exc.details)
        field = None
        if isinstance(exc, ConfigParseError):
            field = exc.key
        if isinstance(exc, TrainingDivergedError) and exc.checkpoint_path is not None:
            details["checkpoint_path"] = str(exc.checkpoint_path)
        return ErrorResponse(
            message=exc.message,
            errors=[
                ErrorDetail(
                    code=exc.code, message=exc.message, field=field, details=details or None
                )
            ],
            run_id=run_id,
        )

    settings = get_settings()
    return ErrorResponse(
        message="Internal error",
        errors=[
            ErrorDetail(
                code="INTERNAL_ERROR",
                message=str(exc) if settings.debug else "An unexpected error occurred",
                field=None,
                details={"traceback": traceback.format_exc()} if settings.debug else None,
            )
        ],
        run_id=run_id,
    )


def handle_cli_errors(
    command: Callable[[], int], error_dir: Path | Callable[[], Path | None] | None = None
) -> int:
    """
    Run a command and convert any exception into a diagnostic and exit code.

    Args:
        command: Zero-argument callable returning an exit code.
        error_dir: Directory to write error.json into, if it exists; a callable is
            resolved after the command fails.

    Returns:
        The command's exit code, or the code mapped from the exception.
    """
    try:
        return command()
    except Exception as exc:
        code = exit_code_for(exc)
        if code == EXIT_UNEXPECTED:
            logger.error(f"Unhandled exception: {exc}", exc_info=True)
        else:
            logger.error(
                f"Command failed: {exc}",
                extra={"code": getattr(exc, "code", "VALIDATION_ERROR"), "exit_code": code},
            )
        if callable(error_dir):
            error_dir = error_dir()
        response = error_response(exc, str(error_dir) if error_dir else None)
        payload = response.model_dump_json(indent=2)
        print(payload, file=sys.stderr)
        if error_dir is not None and error_dir.is_dir():
            RunStorage(error_dir).error_path.write_text(payload + "\n", encoding="utf-8")
        return code

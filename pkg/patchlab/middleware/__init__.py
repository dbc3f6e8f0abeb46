"""
Command-line boundary components.
"""

from patchlab.middleware.error_handler import (
    EXIT_CONFIG,
    EXIT_FAILED,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_UNEXPECTED,
    error_response,
    exit_code_for,
    handle_cli_errors,
)

__all__ = [
    "EXIT_CONFIG",
    "EXIT_FAILED",
    "EXIT_NUMERICAL",
    "EXIT_OK",
    "EXIT_UNEXPECTED",
    "error_response",
    "exit_code_for",
    "handle_cli_errors",
]

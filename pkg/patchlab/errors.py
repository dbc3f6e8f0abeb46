"""
Base exception shared by all patchlab modules.
"""

from typing import Any


class PatchLabError(Exception):
    """Base class for every error patchlab raises on purpose."""

    def __init__(
        self,
        message: str,
        code: str = "PATCHLAB_ERROR",
        details: dict[str, Any] | None = None,
    ):
        self.message = message
        self.code = code
        self.details = details or {}
        super().__init__(self.message)

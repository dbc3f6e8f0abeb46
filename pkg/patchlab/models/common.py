"""
Common Pydantic models used across patchlab.
"""

from datetime import datetime, timezone
from typing import Any

from pydantic import BaseModel, Field

from patchlab.models.enums import ClauseStatus


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class BaseReport(BaseModel):
    """Base report model with common fields."""

    success: bool = Field(..., description="Whether every checked clause passed")
    message: str = Field(..., description="Human-readable summary")
    timestamp: datetime = Field(default_factory=_utcnow, description="Report timestamp")


class ErrorDetail(BaseModel):
    """Detailed error information."""

    code: str = Field(..., description="Error code")
    message: str = Field(..., description="Error message")
    field: str | None = Field(None, description="Config key or object that caused the error")
    details: dict[str, Any] | None = Field(None, description="Additional details")


class ErrorResponse(BaseReport):
    """Diagnostic emitted when a command fails."""

    success: bool = Field(default=False)
    errors: list[ErrorDetail] = Field(default_factory=list, description="List of errors")
    run_id: str | None = Field(None, description="Run directory the error belongs to")


class ClauseResult(BaseModel):
    """One checked inequality with its measured slack."""

    name: str = Field(..., description="Clause identifier")
    inequality: str = Field(..., description="The inequality actually tested")
    status: ClauseStatus = Field(..., description="PASS, FAIL or N/A")
    measured: float | None = Field(None, description="Worst measured value")
    bound: float | None = Field(None, description="Bound the measured value is compared to")
    margin: float | None = Field(
        None, description="Worst slack; negative means the inequality is violated"
    )

    @property
    def passed(self) -> bool:
        """Whether the clause did not fail."""
        return self.status != ClauseStatus.FAIL

"""
Process configuration using pydantic-settings.
Loads settings from PATCHLAB_* environment variables and a .env file.
"""

from functools import lru_cache
from pathlib import Path

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings that apply to every command, independent of the experiment file."""

    model_config = SettingsConfigDict(
        env_prefix="PATCHLAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    debug: bool = Field(default=False, description="Include tracebacks in diagnostics")

    # Reproducibility
    seed: int | None = Field(
        default=None,
        ge=0,
        description="Base seed overriding the experiment file (data=S, init=S+1, eval=S+2)",
    )
    threads: int = Field(default=1, ge=1, description="Worker threads for pair loops")

    # Output
    output_dir: Path | None = Field(
        default=None, description="Override for the experiment output directory"
    )
    cache_dir: Path = Field(
        default=Path(".patchlab_cache"), description="Dataset bundle cache directory"
    )
    plots: bool = Field(default=True, description="Render SVG plots")

    # Logging Settings
    log_level: str = Field(default="INFO", description="Logging level")
    log_format: str = Field(default="text", description="Log format (json or text)")

    @field_validator("log_level")
    @classmethod
    def normalize_level(cls, v: str) -> str:
        """Accept lowercase level names."""
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return level

    @field_validator("log_format")
    @classmethod
    def validate_format(cls, v: str) -> str:
        """Only text and json formatters exist."""
        fmt = v.lower()
        if fmt not in {"text", "json"}:
            raise ValueError(f"Unknown log format: {v}")
        return fmt


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()

import logging
import sys

import structlog
from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    """Process-level settings with environment variable support."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="XVA_",
        case_sensitive=False,
        extra="ignore",
    )

    # Logging
    log_level: str = Field(default="INFO", description="Logging level")
    log_json: bool = Field(default=False, description="Render log events as JSON lines")
    debug_mode: bool = Field(default=False, description="Enable debug mode")

    # Concurrency
    max_workers: int = Field(default=4, ge=1, description="Worker threads for concurrent PDE solves")

    # Engine defaults, used when a run config leaves the engine section out
    default_n_space: int = Field(default=600, ge=3, description="Default spatial node count")
    default_n_time_per_year: int = Field(default=120, ge=1, description="Default time steps per year")

    # Report formatting
    bp_decimals: int = Field(default=2, ge=0, description="Decimals for bp columns on the console")
    float_format: str = Field(default="%.10g", description="CSV float format for raw PV columns")


def load_settings() -> Settings:
    """Load settings with proper error handling and environment loading."""
    try:
        return Settings()
    except Exception as e:
        error_msg = f"Failed to load settings: {e}"
        if "max_workers" in str(e).lower():
            error_msg += "\nXVA_MAX_WORKERS must be a positive integer"
        if "log_level" in str(e).lower():
            error_msg += "\nXVA_LOG_LEVEL must be a standard level name such as INFO"
        raise ValueError(error_msg) from e


def configure_logging(settings: Settings) -> None:
    """Configure structlog once for the process."""
    level = logging.DEBUG if settings.debug_mode else logging.getLevelName(settings.log_level.upper())
    if not isinstance(level, int):
        level = logging.INFO

    renderer = (
        structlog.processors.JSONRenderer()
        if settings.log_json
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )

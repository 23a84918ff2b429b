from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import structlog

from settings import Settings

logger = structlog.get_logger(__name__)


@dataclass
class EngineDependencies:
    """Resources shared by every command of one CLI run."""

    settings: Settings
    executor: ThreadPoolExecutor

    # Runtime state
    run_id: Optional[str] = None
    debug_mode: bool = False

    def grid_defaults(self) -> dict:
        return {
            "n_space": self.settings.default_n_space,
            "n_time_per_year": self.settings.default_n_time_per_year,
        }


async def initialize_dependencies(settings: Settings, run_id: Optional[str] = None) -> EngineDependencies:
    """Initialize shared dependencies with proper error handling."""
    logger.info("initializing_dependencies", max_workers=settings.max_workers)
    try:
        executor = ThreadPoolExecutor(max_workers=settings.max_workers, thread_name_prefix="xva")
        return EngineDependencies(
            settings=settings,
            executor=executor,
            run_id=run_id,
            debug_mode=settings.debug_mode,
        )
    except Exception as e:
        logger.error("dependency_initialization_failed", error=str(e))
        raise


async def cleanup_dependencies(deps: EngineDependencies) -> None:
    """Clean shutdown of all dependencies."""
    logger.info("cleaning_up_dependencies")
    try:
        if deps.executor:
            deps.executor.shutdown(wait=True)
        logger.info("dependencies_cleaned_up")
    except Exception as e:
        logger.error("dependency_cleanup_failed", error=str(e))

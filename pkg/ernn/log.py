"""Console logging setup for the command-line tools."""

import logging
import os

from rich.console import Console
from rich.logging import RichHandler

LOG_LEVEL_ENV = "ERNN_LOG_LEVEL"


def get_log_level(verbosity: int = 0) -> int:
    """Resolve the level from -v flags first, then ERNN_LOG_LEVEL, then WARNING."""
    if verbosity >= 2:
        return logging.DEBUG
    if verbosity == 1:
        return logging.INFO
    name = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.WARNING


def configure_logging(verbosity: int = 0) -> None:
    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        show_time=False,
        markup=False,
    )
    logging.basicConfig(
        level=get_log_level(verbosity),
        format="%(name)s: %(message)s",
        handlers=[handler],
        force=True,
    )

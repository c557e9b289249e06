"""Logging setup backed by rich."""

import logging

from rich.console import Console
from rich.logging import RichHandler

LOGGER_NAME = "surfreg"

_LEVELS = {0: logging.WARNING, 1: logging.INFO}


def setup_logging(verbosity: int = 0, console: Console = None) -> logging.Logger:
    """Install a single RichHandler on the package logger."""
    logger = logging.getLogger(LOGGER_NAME)
    level = _LEVELS.get(verbosity, logging.DEBUG)
    logger.setLevel(level)

    for handler in logger.handlers:
        if isinstance(handler, RichHandler):
            handler.setLevel(level)
            return logger

    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
    )
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter("%(message)s", datefmt="[%X]"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger

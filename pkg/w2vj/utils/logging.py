"""
Logging setup for w2vj.

All diagnostic output goes through one rich handler so warnings line up with
the tables printed by the display manager.
"""

import logging
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

_ROOT = "w2vj"
_configured = False


def setup_logging(verbose: bool = False, console: Optional[Console] = None) -> None:
    """Attach a rich handler to the package logger (idempotent)."""
    global _configured
    logger = logging.getLogger(_ROOT)
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if _configured:
        return
    handler = RichHandler(
        console=console or Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
        markup=False,
    )
    handler.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(handler)
    logger.propagate = True
    _configured = True


def get_logger(name: str) -> logging.Logger:
    """Return a child of the package logger."""
    if name.startswith(_ROOT):
        return logging.getLogger(name)
    return logging.getLogger(f"{_ROOT}.{name}")

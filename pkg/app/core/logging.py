# app/core/logging.py
import logging
import sys

from app.core.config import settings

LOG_FORMAT = "%(asctime)s %(levelname)s [%(name)s] %(message)s"
_ROOT = "app"


def get_logger(name: str) -> logging.Logger:
    """Return a logger under the package namespace."""
    if not name.startswith(_ROOT):
        name = f"{_ROOT}.{name}"
    return logging.getLogger(name)


def configure_logging(level: str | int | None = None) -> None:
    """
    Install one stream handler on the package logger.

    Calling it again only changes the level, so the CLI and the HTTP app can
    both call it without duplicating output.
    """
    logger = logging.getLogger(_ROOT)
    logger.setLevel(level or settings.LOG_LEVEL)
    if not any(getattr(h, "_matchlab", False) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._matchlab = True  # type: ignore[attr-defined]
        logger.addHandler(handler)

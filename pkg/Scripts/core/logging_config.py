"""
Logging for the nlgp package: child loggers under ``nlgp.*`` and a per-run
setup with a console handler and a DEBUG log file.

Usage in any module:
    from Scripts.core.logging_config import get_logger
    logger = get_logger(__name__)

Usage in a CLI command:
    from Scripts.core.logging_config import setup_run_logging
    setup_run_logging(log_dir="Results/run/Logs", run_name="train_N-MOGP")
"""

from __future__ import annotations

import logging
import sys
from datetime import datetime
from pathlib import Path

from pydantic import BaseModel

# ── Constants ────────────────────────────────────────────────────────────────
_ROOT_LOGGER = "nlgp"
_WARNINGS_LOGGER = "py.warnings"
_LOG_FORMAT = "%(asctime)s [%(levelname)-8s] [%(run)s] %(name)s - %(message)s"
_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class _RunNameFilter(logging.Filter):
    """Stamp every record with the name of the active run."""

    def __init__(self, run_name: str) -> None:
        super().__init__()
        self.run_name = run_name

    def filter(self, record: logging.LogRecord) -> bool:
        record.run = self.run_name
        return True


# ── Public API ────────────────────────────────────────────────────────────────

def get_logger(name: str) -> logging.Logger:
    """Return a child logger scoped under the 'nlgp' hierarchy.

    Args:
        name: Typically ``__name__`` of the calling module.

    Returns:
        A named :class:`logging.Logger` instance.
    """
    qualified = f"{_ROOT_LOGGER}.{name}" if not name.startswith(_ROOT_LOGGER) else name
    return logging.getLogger(qualified)


def setup_run_logging(
    log_dir: str | Path = "Logs",
    run_name: str = "run",
    level: int = logging.INFO,
) -> logging.Logger:
    """Configure the root 'nlgp' logger with stdout + file handlers.

    Call this **once** at the start of a CLI command.  The file handler is
    always DEBUG so that jitter escalations and per-epoch objectives end up
    in the log file even when the console shows INFO only.  Python warnings
    (torch, scipy) are routed into the same handlers.

    Args:
        log_dir:  Directory where the log file is written (created if absent).
        run_name: Tags every record and names the file, e.g. ``train_N-MOGP_20240101_120000.log``.
        level:    Console logging level (default: INFO).

    Returns:
        The configured root ``nlgp`` :class:`logging.Logger`.
    """
    root = logging.getLogger(_ROOT_LOGGER)
    root.setLevel(logging.DEBUG)

    # Re-calls keep the first setup
    if root.handlers:
        return root

    formatter = logging.Formatter(_LOG_FORMAT, datefmt=_DATE_FORMAT)
    run_filter = _RunNameFilter(run_name)

    stdout_handler = logging.StreamHandler(sys.stdout)
    stdout_handler.setLevel(level)

    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    log_file = log_path / f"{run_name}_{datetime.now():%Y%m%d_%H%M%S}.log"
    file_handler = logging.FileHandler(log_file, encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)

    warnings_logger = logging.getLogger(_WARNINGS_LOGGER)
    for handler in (stdout_handler, file_handler):
        handler.setFormatter(formatter)
        handler.addFilter(run_filter)
        root.addHandler(handler)
        warnings_logger.addHandler(handler)
    logging.captureWarnings(True)

    root.info("Logging initialised → %s", log_file)
    return root


def log_settings(logger: logging.Logger, **sections: BaseModel) -> None:
    """Log each validated configuration section as one ``key=value`` line."""
    for title, section in sections.items():
        fields = section.model_dump(mode="json", exclude_none=True)
        logger.info("%s: %s", title, " ".join(f"{k}={v}" for k, v in fields.items()))


def reset_logging() -> None:
    """Remove the handlers installed by :func:`setup_run_logging`.

    Intended for tests, so that several CLI invocations start clean.
    """
    logging.captureWarnings(False)
    for name in (_ROOT_LOGGER, _WARNINGS_LOGGER):
        logger = logging.getLogger(name)
        for handler in logger.handlers[:]:
            handler.close()
            logger.removeHandler(handler)

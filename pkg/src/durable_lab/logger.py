"""
Logging utility module for the durability lab.

All modules obtain their logger through ``get_logger(__name__)`` so console
output looks the same everywhere. Report files never carry timestamps; the
harness attaches a separate file log (``attach_run_log``) that does.

Features:
---------
- One stdout handler per logger, no duplicate lines
- Level controlled by the ``LOG_LEVEL`` environment variable (default INFO)
- Optional timestamped file log on the ``durable_lab`` package logger that
  every module logger feeds into
"""

from __future__ import annotations

import logging
import os
import sys
from pathlib import Path

_DEFAULT_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
_FORMAT = "[%(asctime)s] [%(levelname)s] %(name)s - %(message)s"
_DATEFMT = "%Y-%m-%d %H:%M:%S"
_PACKAGE = "durable_lab"


def _package_logger() -> logging.Logger:
    pkg = logging.getLogger(_PACKAGE)
    # the package logger only ever holds run-log file handlers
    pkg.propagate = False
    pkg.setLevel(logging.DEBUG)
    return pkg


def get_logger(name: str) -> logging.Logger:
    """
    Retrieve a logger configured for the given module name.

    - Only one StreamHandler is attached per logger
    - Format and level are uniform across modules (``LOG_LEVEL``)
    - Records continue to the ``durable_lab`` package logger, which holds
      the run log when one is attached and nothing otherwise

    Parameters:
    -----------
    name : str
        The name of the logger, typically the module's ``__name__``.
    """
    _package_logger()
    logger = logging.getLogger(name)

    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(logging.Formatter(_FORMAT, _DATEFMT))
        handler.setLevel(_DEFAULT_LEVEL)
        logger.addHandler(handler)
        logger.setLevel(logging.DEBUG)
        logger.propagate = name.startswith(_PACKAGE + ".")

    return logger


def attach_run_log(path: Path | str, level: str = "DEBUG") -> logging.Handler:
    """
    Attach a timestamped file log that receives every ``durable_lab`` record.

    Returns the handler so callers can remove it with ``detach_run_log``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(_FORMAT, _DATEFMT))
    handler.setLevel(level.upper())
    _package_logger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    _package_logger().removeHandler(handler)
    handler.close()

"""
Lightweight, colorized console helpers for ablo.

The CLI and the scenario runners report progress through these helpers.
All of it goes to stderr: stdout carries only the JSON a command prints.
Library modules log through stdlib loggers named `ablo.<module>`;
`configure_logging` wires those loggers to stderr once, from the CLI.
"""

from __future__ import annotations

import logging
import sys
from typing import Optional


# ------------------------------------------------------------
# ANSI color codes (Windows 10+ & modern terminals support this)
# ------------------------------------------------------------

RESET = "\033[0m"
BOLD = "\033[1m"

GREEN = "\033[32m"
YELLOW = "\033[33m"
RED = "\033[31m"
CYAN = "\033[36m"

_LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def _emit(color: str, message: str, tag: Optional[str] = None) -> None:
    if tag is None:
        line = f"{color}{message}{RESET}"
    else:
        line = f"{color}[{tag}]{RESET} {message}"
    print(line, file=sys.stderr)


# ------------------------------------------------------------
# Helper functions
# ------------------------------------------------------------

def info(message: str) -> None:
    """Neutral progress message."""
    _emit(CYAN, message)


def ok(message: str) -> None:
    _emit(GREEN, message, "OK")


def warn(message: str) -> None:
    _emit(YELLOW, message, "WARN")


def error(message: str) -> None:
    _emit(RED, message, "ERROR")


def heading(title: str) -> None:
    """Bold section heading, one per scenario run."""
    _emit(BOLD, title)


def configure_logging(verbosity: int = 0) -> None:
    """
    Attach a single stderr handler to the `ablo` logger hierarchy.

    Args:
        verbosity: 0 shows warnings, 1 adds info, 2 or more adds debug.
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger("ablo")
    root.setLevel(level)
    for h in root.handlers:
        if getattr(h, "_ablo_handler", False):
            # sys.stderr may have been swapped since the last call
            h.stream = sys.stderr  # setStream would flush the old, possibly closed, stream
            return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    handler._ablo_handler = True  # type: ignore[attr-defined]
    root.addHandler(handler)

"""Logging and environment overrides shared by every semifmm module."""
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional

ENV_OUTPUT_DIR = "SEMIFMM_OUTPUT_DIR"
ENV_WORKERS = "SEMIFMM_WORKERS"
ENV_LOG_LEVEL = "SEMIFMM_LOG_LEVEL"
LOG_FILE_NAME = "semifmm.log"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def log_file_path() -> Path:
    """semifmm.log in the platform temp directory."""
    return Path(tempfile.gettempdir()) / LOG_FILE_NAME


def _env(name: str) -> Optional[str]:
    value = os.environ.get(name, "").strip()
    return value or None


def output_dir_override() -> Optional[Path]:
    """Output directory from the environment, if set."""
    value = _env(ENV_OUTPUT_DIR)
    return Path(value) if value else None


def workers_override() -> Optional[int]:
    """Worker count from the environment, if set and valid."""
    value = _env(ENV_WORKERS)
    if value is None:
        return None
    try:
        return max(1, int(value))
    except ValueError:
        logging.getLogger("semifmm").warning(f"⚠️ Ignoring non-integer {ENV_WORKERS}={value!r}")
        return None


def setup_logging() -> logging.Logger:
    level = getattr(logging, (_env(ENV_LOG_LEVEL) or "INFO").upper(), logging.INFO)
    path = log_file_path()

    handlers = [logging.StreamHandler(sys.stderr)]
    try:
        handlers.insert(0, logging.FileHandler(path, mode="a", encoding="utf-8"))
    except OSError as e:
        # a locked or unwritable log file leaves stderr only
        print(f"Warning: could not open log file {path}: {e}", file=sys.stderr)
    for handler in handlers:
        handler.setLevel(level)

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers)
    semifmm_logger = logging.getLogger("semifmm")
    semifmm_logger.debug(f"🔧 Log file path: {path}")
    return semifmm_logger


logger = setup_logging()

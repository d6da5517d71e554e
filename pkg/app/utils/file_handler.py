# app/utils/file_handler.py

import csv
import json
import logging
import os
import threading
import uuid
from datetime import datetime
from typing import Any, Iterable, List, Optional, Sequence

from app import config

# Using __name__ ensures the logger name matches the module path (app.utils.file_handler)
logger = logging.getLogger(__name__)

# Reports can be written by the worker thread and the CLI; one writer at a time
_write_lock = threading.Lock()


def get_run_root() -> str:
    """Absolute path of the run directory root (GAIT_RUN_ROOT, default ./runs)."""
    return os.path.abspath(os.getenv("GAIT_RUN_ROOT", config.RUN_ROOT))


def _ensure_dir_exists(path: str):
    """Ensures a directory exists, creating it if necessary. Logs errors."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        logger.error(f"Failed to create directory {path}: {e}")
        raise


def new_run_id(prefix: str = "run") -> str:
    return f"{prefix}-{datetime.now().strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:6]}"


def get_run_dir(run_id: str, create: bool = False) -> str:
    """Data directory of one run; run ids are single path components."""
    if not run_id or os.path.sep in run_id or run_id in (".", ".."):
        raise ValueError(f"Invalid run id: {run_id!r}")
    path = os.path.join(get_run_root(), run_id)
    if create:
        _ensure_dir_exists(path)
    return path


def save_json(path: str, data: Any) -> str:
    """Writes ``data`` as indented JSON; returns the path."""
    _ensure_dir_exists(os.path.dirname(os.path.abspath(path)))
    try:
        with _write_lock:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(data, f, ensure_ascii=False, indent=4)
        logger.debug(f"JSON saved to {path}")
        return path
    except (OSError, TypeError) as e:
        logger.error(f"Error saving JSON to {path}: {e}", exc_info=True)
        raise


def read_json(path: str) -> Optional[Any]:
    """Parsed JSON, or None if the file does not exist."""
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    _ensure_dir_exists(os.path.dirname(os.path.abspath(path)))
    with _write_lock:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(list(header))
            count = 0
            for row in rows:
                writer.writerow(list(row))
                count += 1
    logger.debug(f"CSV with {count} rows saved to {path}")
    return path


def read_csv(path: str) -> List[List[str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.reader(f))


def save_status(run_id: str, state: str, **fields: Any) -> str:
    """status.json of a queued run: queued | running | done | failed."""
    record = {"run_id": run_id, "state": state, "updated_at": datetime.now().isoformat(), **fields}
    return save_json(os.path.join(get_run_dir(run_id, create=True), "status.json"), record)

# app/processing/queue_manager.py

import asyncio
import json
import logging
import os
from typing import Any, Dict, List, Optional

from app import config

logger = logging.getLogger(__name__)

# Queue of runs waiting for the background worker
processing_queue: "asyncio.Queue[Dict[str, Any]]" = asyncio.Queue()

# On-disk persistence
PENDING_QUEUE_FILE = config.QUEUE_FILE
# Mirrors the runs not yet finished; loaded at startup, saved on every add/remove
_disk_queue_mirror: List[Dict[str, Any]] = []


def load_disk_queue() -> List[Dict[str, Any]]:
    """Loads the pending run list from the JSON file."""
    if not os.path.exists(PENDING_QUEUE_FILE):
        logger.info(f"{PENDING_QUEUE_FILE} not found. Starting with empty queue.")
        return []
    try:
        with open(PENDING_QUEUE_FILE, "r", encoding="utf-8") as f:
            content = f.read()
        if not content:
            logger.info(f"{PENDING_QUEUE_FILE} is empty.")
            return []
        loaded = json.loads(content)
        if not isinstance(loaded, list):
            logger.warning(f"Content in {PENDING_QUEUE_FILE} is not a list. Ignoring.")
            return []
        logger.info(f"Loaded {len(loaded)} runs from {PENDING_QUEUE_FILE}")
        return [item for item in loaded if isinstance(item, dict) and item.get("run_id")]
    except json.JSONDecodeError as e:
        logger.error(f"Error decoding JSON from {PENDING_QUEUE_FILE}: {e}. Starting with empty queue.")
        return []
    except OSError as e:
        logger.error(f"Error loading disk queue from {PENDING_QUEUE_FILE}: {e}")
        return []


def save_disk_queue():
    """Saves the current disk mirror to the JSON file."""
    try:
        with open(PENDING_QUEUE_FILE, "w", encoding="utf-8") as f:
            json.dump(_disk_queue_mirror, f, indent=2)
        logger.debug(f"Saved {len(_disk_queue_mirror)} runs to {PENDING_QUEUE_FILE}")
    except OSError as e:
        logger.error(f"Error saving disk queue to {PENDING_QUEUE_FILE}: {e}")


def pending_runs() -> List[str]:
    return [item["run_id"] for item in _disk_queue_mirror]


def find_item(run_id: str) -> Optional[Dict[str, Any]]:
    for item in _disk_queue_mirror:
        if item.get("run_id") == run_id:
            return item
    return None


async def add_item(item: Dict[str, Any]):
    """Adds a run to the processing queue and the disk mirror, then saves."""
    if not isinstance(item, dict) or not item.get("run_id"):
        logger.warning(f"Attempted to queue an item without run_id: {item!r}")
        return
    await processing_queue.put(item)
    if find_item(item["run_id"]) is None:
        _disk_queue_mirror.append(item)
        save_disk_queue()
    logger.info(
        f"Run {item['run_id']} added to queue (Queue size: {processing_queue.qsize()}, "
        f"Disk mirror size: {len(_disk_queue_mirror)})"
    )


def remove_item_from_mirror(item_to_remove: Dict[str, Any]):
    """Removes a finished run from the disk mirror and saves."""
    global _disk_queue_mirror
    run_id = item_to_remove.get("run_id")
    initial_len = len(_disk_queue_mirror)
    _disk_queue_mirror = [item for item in _disk_queue_mirror if item.get("run_id") != run_id]
    if len(_disk_queue_mirror) < initial_len:
        save_disk_queue()
        logger.info(f"Run {run_id} removed from disk mirror.")
    else:
        logger.warning(f"Could not find run {run_id} in disk mirror for removal.")


def initialize_queue():
    """Loads the disk queue and populates the in-memory queue at startup."""
    global _disk_queue_mirror
    _disk_queue_mirror = load_disk_queue()
    for item in _disk_queue_mirror:
        processing_queue.put_nowait(item)
    logger.info(f"Initialized in-memory queue with {len(_disk_queue_mirror)} runs from disk.")

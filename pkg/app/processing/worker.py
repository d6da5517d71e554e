# app/processing/worker.py
import asyncio
import logging
from typing import Any, Dict

from app.config import load_config
from app.processing import cv, queue_manager
from app.utils import file_handler
from app.utils.errors import ConfigError, GaitVLMError

logger = logging.getLogger(__name__)


def process_single_run(item: Dict[str, Any]) -> bool:
    """Runs one queued experiment synchronously. Intended for asyncio.to_thread."""
    run_id = item.get("run_id")
    if not run_id:
        logger.error(f"Worker (sync): Invalid run item, missing run_id: {item}")
        return False

    logger.info(f"Worker (sync): Starting run {run_id} (ablation={item.get('ablation', False)})")
    try:
        cfg = load_config(overrides=item.get("overrides") or {})
        run_dir = file_handler.get_run_dir(run_id, create=True)
        file_handler.save_status(run_id, "running", variant=cfg.variant_name())
        if item.get("ablation"):
            reports = cv.run_ablation(cfg, run_dir)
            summary = {name: r.mean_accuracy for name, r in reports.items()}
        else:
            report = cv.run_cv(cfg, run_dir)
            summary = {report.variant: report.mean_accuracy}
    except GaitVLMError as e:
        logger.error(f"Worker (sync): Run {run_id} failed: {e}", exc_info=True)
        file_handler.save_status(run_id, "failed", **e.to_record())
        # Config errors are not retried
        return isinstance(e, ConfigError)
    except Exception as e:
        logger.error(f"Worker (sync): Unexpected error in run {run_id}: {e}", exc_info=True)
        file_handler.save_status(run_id, "failed", error=type(e).__name__, message=str(e))
        return False

    file_handler.save_status(run_id, "done", mean_accuracy=summary)
    logger.info(f"Worker (sync): Run {run_id} finished: {summary}")
    return True


async def run_worker():
    """Continuously fetches runs from the queue and processes them one at a time."""
    logger.info("Worker started, waiting for runs...")
    while True:
        try:
            item = await queue_manager.processing_queue.get()
            run_id = item.get("run_id", "N/A")
            logger.info(f"Worker: Dequeued run {run_id}. Starting processing in thread.")
            finished = False
            try:
                finished = await asyncio.to_thread(process_single_run, item)
            except Exception as e:
                logger.error(f"Worker: Unhandled exception during to_thread execution for run {run_id}: {e}", exc_info=True)
                finished = False
            finally:
                queue_manager.processing_queue.task_done()
                if finished:
                    queue_manager.remove_item_from_mirror(item)
                else:
                    logger.warning(f"Worker: Run {run_id} did not finish. It remains in the disk queue.")
        except asyncio.CancelledError:
            logger.info("Worker cancellation requested.")
            break
        except Exception as e:
            logger.error(f"Worker loop error: {e}", exc_info=True)
            await asyncio.sleep(5)

    logger.info("Worker stopped.")

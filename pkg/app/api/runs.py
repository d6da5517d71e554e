# app/api/runs.py

import logging
import os
from datetime import datetime

from fastapi import APIRouter, Body, HTTPException, Request

from app.config import load_config
from app.processing import queue_manager
from app.processing.cv import REPORT_NAME
from app.utils import file_handler
from app.utils.errors import ConfigError
from app.utils.models import RunRequest

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("/runs", status_code=202)  # 202 Accepted: the run is processed by the background worker
async def queue_run(request: Request, data: RunRequest = Body(...)):
    """Validates the config overrides and queues a cross-validation run."""
    logger.info(f"Run request received from {request.client.host if request.client else 'unknown'}")
    try:
        cfg = load_config(overrides=data.overrides)
    except ConfigError as e:
        logger.warning(f"Rejected run request: {e}")
        raise HTTPException(status_code=400, detail=e.to_record())

    run_id = file_handler.new_run_id()
    item = {
        "run_id": run_id,
        "overrides": data.overrides,
        "ablation": data.ablation,
        "queue_number": len(queue_manager._disk_queue_mirror) + 1,
        "received_at": datetime.now().isoformat(),
    }
    file_handler.save_status(run_id, "queued", variant="ablation" if data.ablation else cfg.variant_name())
    await queue_manager.add_item(item)
    return {"run_id": run_id, "status": "queued", "queue_number": item["queue_number"]}


@router.get("/runs/{run_id}")
async def get_run(run_id: str):
    """Status of a run, with its report once finished."""
    try:
        run_dir = file_handler.get_run_dir(run_id)
    except ValueError:
        raise HTTPException(status_code=404, detail=f"Unknown run: {run_id}")
    status = file_handler.read_json(os.path.join(run_dir, "status.json"))
    if status is None:
        raise HTTPException(status_code=404, detail=f"Unknown run: {run_id}")
    report_name = "ablation.json" if status.get("variant") == "ablation" else REPORT_NAME
    report = file_handler.read_json(os.path.join(run_dir, report_name))
    return {**status, "report": report}

# app/main.py

import asyncio
import logging

import uvicorn
from fastapi import FastAPI, Request

from app import config
from app.api import runs
from app.processing import queue_manager, worker

# --- Logging Setup ---
numeric_level = config.setup_logging()
# Match uvicorn's verbosity to ours
uvicorn_log_level = "debug" if numeric_level <= logging.DEBUG else "info"

logger = logging.getLogger(__name__)

# --- FastAPI App Setup ---
app = FastAPI(title="Gait VLM Run Service")


# --- Middleware ---
@app.middleware("http")
async def log_requests(request: Request, call_next):
    client = request.client.host if request.client else "unknown"
    logger.debug(f"Request: {request.method} {request.url} from {client}")
    response = await call_next(request)
    logger.debug(f"Response: {response.status_code}")
    return response


# --- API Routers ---
app.include_router(runs.router, prefix="/api/v1")

# --- Background Tasks ---
worker_task = None


@app.on_event("startup")
async def startup_event():
    """Restore pending runs and start the background worker."""
    global worker_task
    logger.info("Application startup...")
    queue_manager.initialize_queue()
    worker_task = asyncio.create_task(worker.run_worker())
    logger.info("Background worker started.")


@app.on_event("shutdown")
async def shutdown_event():
    """Gracefully shutdown the background worker."""
    logger.info("Application shutdown...")
    if worker_task:
        logger.info("Attempting to cancel worker task...")
        worker_task.cancel()
        try:
            await asyncio.wait_for(worker_task, timeout=10.0)
        except asyncio.CancelledError:
            logger.info("Worker task successfully cancelled.")
        except asyncio.TimeoutError:
            logger.warning("Worker task did not finish cancelling within timeout.")
        except Exception as e:
            logger.error(f"Error during worker task shutdown: {e}", exc_info=True)
    logger.info("Shutdown complete.")


# --- Root endpoint for health check ---
@app.get("/", tags=["Health Check"])
async def read_root():
    return {"status": "OK", "message": "Gait VLM run service is running", "pending_runs": queue_manager.pending_runs()}


def serve(host: str = "0.0.0.0", port: int = config.PORT, reload: bool = False):
    logger.info(f"Starting server on http://{host}:{port}")
    uvicorn.run("app.main:app", host=host, port=port, reload=reload, log_level=uvicorn_log_level)


# --- Main execution ---
if __name__ == "__main__":
    serve(reload=True)

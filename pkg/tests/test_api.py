# tests/test_api.py

import asyncio

import pytest
from fastapi.testclient import TestClient

from app import main
from app.processing import queue_manager, worker


@pytest.fixture
def client(run_root, tmp_path, monkeypatch):
    async def idle_worker():
        await asyncio.Event().wait()

    monkeypatch.setattr(worker, "run_worker", idle_worker)
    monkeypatch.setattr(queue_manager, "PENDING_QUEUE_FILE", str(tmp_path / "pending.json"))
    monkeypatch.setattr(queue_manager, "processing_queue", asyncio.Queue())
    monkeypatch.setattr(queue_manager, "_disk_queue_mirror", [])
    with TestClient(main.app) as c:
        yield c


def test_health_check(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["status"] == "OK"
    assert response.json()["pending_runs"] == []


def test_queue_run(client, tmp_path):
    response = client.post("/api/v1/runs", json={"overrides": {"seed": 4, "use_nte": False}})
    assert response.status_code == 202
    body = response.json()
    assert body["status"] == "queued"
    assert body["queue_number"] == 1
    assert queue_manager.pending_runs() == [body["run_id"]]
    assert (tmp_path / "pending.json").exists()

    status = client.get(f"/api/v1/runs/{body['run_id']}")
    assert status.status_code == 200
    assert status.json()["state"] == "queued"
    assert status.json()["variant"] == "kapt"
    assert status.json()["report"] is None
    assert client.get("/").json()["pending_runs"] == [body["run_id"]]


def test_ablation_request(client):
    body = client.post("/api/v1/runs", json={"ablation": True}).json()
    assert client.get(f"/api/v1/runs/{body['run_id']}").json()["variant"] == "ablation"


@pytest.mark.parametrize("overrides", [{"d": 10}, {"learning_rate": 0.1}, {"task": "running"}])
def test_invalid_overrides_are_rejected(client, overrides):
    response = client.post("/api/v1/runs", json={"overrides": overrides})
    assert response.status_code == 400
    assert response.json()["detail"]["error"] == "ConfigError"
    assert queue_manager.pending_runs() == []


def test_unknown_run(client):
    assert client.get("/api/v1/runs/run-missing").status_code == 404


def test_queue_survives_restart(run_root, tmp_path, monkeypatch):
    monkeypatch.setattr(queue_manager, "PENDING_QUEUE_FILE", str(tmp_path / "pending.json"))
    monkeypatch.setattr(queue_manager, "_disk_queue_mirror", [{"run_id": "run-x"}])
    queue_manager.save_disk_queue()
    monkeypatch.setattr(queue_manager, "processing_queue", asyncio.Queue())
    queue_manager.initialize_queue()
    assert queue_manager.pending_runs() == ["run-x"]
    assert queue_manager.processing_queue.qsize() == 1

import time
from collections import deque

import pytest
from fastapi.testclient import TestClient

import server


@pytest.fixture
def client():
    with TestClient(server.app) as client:
        yield client


@pytest.fixture
def served(tiny_model):
    server.state.model = tiny_model
    yield tiny_model
    server.state.model = None


def patient_payload(model, patient_id="EXT1"):
    codes = model.vocab.codes
    return {
        "patient_id": patient_id,
        "demographics": {"age": 52, "sex": "f"},
        "visits": [{"codes": codes[:2]}, {"codes": codes[1:4]}, {"codes": [codes[0]]}],
    }


def wait_for(client, job_id, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        job = client.get(f"/jobs/{job_id}").json()
        if job["status"] != "running":
            return job
        time.sleep(0.05)
    raise AssertionError(f"job {job_id} still running after {timeout}s")


def test_root_reports_model_state(client, served):
    body = client.get("/").json()
    assert body["model_loaded"] is True


def test_risk_score(client, served):
    response = client.post("/risk_score", json=patient_payload(served))
    assert response.status_code == 200
    body = response.json()
    assert body["patient_id"] == "EXT1"
    assert 0.0 < body["score"] < 1.0


def test_risk_score_with_short_history(client, served):
    response = client.post("/risk_score", params={"history": "last-k", "k": 2}, json=patient_payload(served))
    assert response.status_code == 200


def test_next_visit(client, served):
    response = client.post("/next_visit", params={"max_codes": 3}, json=patient_payload(served))
    assert response.status_code == 200
    predicted = response.json()["predicted"]
    assert len(predicted) <= 3
    assert set(predicted) <= set(served.vocab.codes)


def test_requests_without_a_model_are_rejected(client, tiny_model):
    assert client.get("/").json()["model_loaded"] is False
    response = client.post("/risk_score", json=patient_payload(tiny_model))
    assert response.status_code == 422
    assert response.json()["error"] == "UsageError"
    assert response.json()["exit_code"] == 2


def test_invalid_record_is_rejected(client, served):
    payload = patient_payload(served)
    payload["visits"] = payload["visits"][:1]
    assert client.post("/risk_score", json=payload).status_code == 422


def test_score_job_runs_to_completion(client, served):
    patients = [patient_payload(served, f"EXT{i}") for i in range(3)]
    response = client.post("/jobs/score", json={"patients": patients})
    assert response.json()["status"] == "accepted"
    job = wait_for(client, response.json()["job_id"])
    assert job["status"] == "success"
    assert [row["patient_id"] for row in job["result"]] == ["EXT0", "EXT1", "EXT2"]
    assert job["logs"]
    assert client.get("/jobs").json()[0]["id"] == job["id"]


def test_unknown_job_is_404(client):
    assert client.get("/jobs/does-not-exist").status_code == 404


def test_websocket_receives_job_start(client, served):
    with client.websocket_connect("/ws") as websocket:
        response = client.post("/jobs/score", json={"patients": [patient_payload(served)]})
        message = websocket.receive_json()
        assert message["type"] == "start"
        assert message["job_id"] == response.json()["job_id"]
        wait_for(client, message["job_id"])


def test_score_job_that_crashes_is_marked_failed(client, served, monkeypatch):
    def crash(*args, **kwargs):
        raise RuntimeError("scorer blew up")

    monkeypatch.setattr(server, "batch_score", crash)
    with client.websocket_connect("/ws") as websocket:
        response = client.post("/jobs/score", json={"patients": [patient_payload(served)]})
        job = wait_for(client, response.json()["job_id"])
        messages = [websocket.receive_json() for _ in range(4)]
    assert job["status"] == "failed"
    assert job["result"] == {"error": "RuntimeError", "detail": "scorer blew up"}
    assert messages[-1]["type"] == "complete" and messages[-1]["status"] == "failed"


def test_job_history_is_capped(client, served, monkeypatch):
    monkeypatch.setattr(server, "job_history", deque(maxlen=2))
    ids = [client.post("/jobs/score", json={"patients": [patient_payload(served)]}).json()["job_id"] for _ in range(3)]
    for job_id in ids[1:]:
        wait_for(client, job_id)
    assert [job["id"] for job in client.get("/jobs").json()] == ids[:0:-1]

import asyncio
import json
import logging
import uuid
from collections import deque
from contextlib import asynccontextmanager
from datetime import datetime
from typing import Any, Deque, Dict, List, Literal, Optional

from fastapi import FastAPI, HTTPException, Request, WebSocket, WebSocketDisconnect
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from decode_lab.checkpoint import load_checkpoint
from decode_lab.corpus import flatten_history
from decode_lab.errors import DecodeLabError, UsageError
from decode_lab.inference import DEFAULT_MAX_CODES, batch_score, generate_next_visit
from decode_lab.model import DecodeModel
from decode_lab.schemas import PatientRecord
from decode_lab.settings import get_settings

settings = get_settings()

# Configure Logging
logging.basicConfig(level=settings.log_level)
logger = logging.getLogger("DecodeLabServer")


# --- Served Model ---
class ModelState:
    def __init__(self):
        self.model: Optional[DecodeModel] = None
        self.checkpoint_path: Optional[str] = None

    def load(self, path: str):
        checkpoint = load_checkpoint(path)
        if checkpoint.vocab is None:
            raise UsageError(f"{path} carries no vocabulary and cannot be served")
        self.model = checkpoint.model()
        self.checkpoint_path = str(path)
        logger.info(f"Serving checkpoint {path} ({len(checkpoint.vocab)} tokens)")

    def require(self) -> DecodeModel:
        if self.model is None:
            raise UsageError("no checkpoint loaded; set DECODE_LAB_CHECKPOINT or run `serve --checkpoint`")
        return self.model


state = ModelState()


@asynccontextmanager
async def lifespan(app: FastAPI):
    if state.model is None and settings.checkpoint:
        state.load(settings.checkpoint)
    yield


app = FastAPI(title="decode_lab", lifespan=lifespan)

# CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(DecodeLabError)
async def decode_lab_error_handler(request: Request, exc: DecodeLabError):
    return JSONResponse(
        status_code=422,
        content={"error": type(exc).__name__, "detail": str(exc), "exit_code": exc.exit_code},
    )


# --- InMemory Job Store ---
# Structure: { "id": str, "kind": str, "status": str, "created_at": str, "logs": list, "result": Any, "payload": dict }
job_history: Deque[Dict[str, Any]] = deque(maxlen=settings.max_jobs)
running_jobs = set()

def add_job_record(job_id: str, kind: str, payload: Dict[str, Any]):
    record = {
        "id": job_id,
        "kind": kind,
        "status": "running",
        "created_at": datetime.now().isoformat(),
        "logs": [],
        "result": None,
        "payload": payload,
    }
    job_history.appendleft(record)  # Newest first; the oldest falls off at max_jobs
    return record

def find_job(job_id: str) -> Optional[Dict[str, Any]]:
    for job in job_history:
        if job["id"] == job_id:
            return job
    return None

def update_job_status(job_id: str, status: str, result: Any = None):
    job = find_job(job_id)
    if job is not None:
        job["status"] = status
        if result is not None:
            job["result"] = result

def append_job_log(job_id: str, message: str):
    job = find_job(job_id)
    if job is not None:
        timestamp = datetime.now().strftime("%H:%M:%S")
        job["logs"].append(f"[{timestamp}] {message}")


# WebSocket Manager
class ConnectionManager:
    def __init__(self):
        self.active_connections: list[WebSocket] = []

    async def connect(self, websocket: WebSocket):
        await websocket.accept()
        self.active_connections.append(websocket)

    def disconnect(self, websocket: WebSocket):
        if websocket in self.active_connections:
            self.active_connections.remove(websocket)

    async def broadcast_json(self, data: Dict[str, Any]):
        message = json.dumps(data, default=str)
        for connection in list(self.active_connections):
            try:
                await connection.send_text(message)
            except Exception:
                self.disconnect(connection)

manager = ConnectionManager()


# Data Models
class ScoreJobRequest(BaseModel):
    patients: List[PatientRecord] = Field(min_length=1)
    history: Literal["full", "last-k"] = "full"
    k: int = Field(default=5, ge=2)


@app.get("/")
async def root():
    return {
        "status": "decode_lab server running",
        "model_loaded": state.model is not None,
        "checkpoint": state.checkpoint_path,
    }

@app.post("/risk_score")
async def risk_score(record: PatientRecord, history: Literal["full", "last-k"] = "full", k: int = 5):
    model = state.require()
    scored = await asyncio.to_thread(batch_score, model, [record], history, k, threads=1)
    patient_id, score = scored[0]
    return {"patient_id": patient_id, "score": score}

@app.post("/next_visit")
async def next_visit(record: PatientRecord, max_codes: int = DEFAULT_MAX_CODES):
    """Predicted codes of the visit after the last one in the record."""
    model = state.require()
    tokens = flatten_history(record, len(record.visits), model.vocab, model.config.max_seq_len)
    predicted = await asyncio.to_thread(generate_next_visit, model, tokens, max_codes)
    return {"patient_id": record.patient_id, "predicted": sorted(predicted)}

@app.get("/jobs")
async def get_jobs():
    return list(job_history)

@app.get("/jobs/{job_id}")
async def get_job_details(job_id: str):
    job = find_job(job_id)
    if job is None:
        raise HTTPException(status_code=404, detail="Job not found")
    return job

@app.websocket("/ws")
async def websocket_endpoint(websocket: WebSocket):
    await manager.connect(websocket)
    try:
        while True:
            await websocket.receive_text()
            # Keep alive
    except WebSocketDisconnect:
        manager.disconnect(websocket)

async def log_and_broadcast(job_id: str, message: str):
    """Save log to the job record and broadcast to WS"""
    append_job_log(job_id, message)
    await manager.broadcast_json({"type": "log", "job_id": job_id, "message": message})

async def run_score_job(job_id: str, model: DecodeModel, request: ScoreJobRequest):
    await manager.broadcast_json({
        "type": "start",
        "job_id": job_id,
        "kind": "score",
        "timestamp": datetime.now().isoformat(),
    })
    await log_and_broadcast(job_id, f"Scoring {len(request.patients)} patients ({request.history} history)")
    result = None
    try:
        scored = await asyncio.to_thread(batch_score, model, request.patients, request.history, request.k)
        result = [{"patient_id": patient_id, "score": score} for patient_id, score in scored]
        status = "success"
        await log_and_broadcast(job_id, "Scoring complete.")
    except Exception as e:
        if isinstance(e, DecodeLabError):
            logger.error(f"Job {job_id} failed: {e}")
        else:
            logger.exception(f"Job {job_id} crashed")
        status = "failed"
        result = {"error": type(e).__name__, "detail": str(e)}
        await log_and_broadcast(job_id, f"Error: {e}")

    update_job_status(job_id, status, result)
    await manager.broadcast_json({"type": "complete", "job_id": job_id, "status": status, "result": result})

@app.post("/jobs/score")
async def create_score_job(request: ScoreJobRequest):
    model = state.require()
    job_id = str(uuid.uuid4())
    add_job_record(job_id, "score", {"n_patients": len(request.patients), "history": request.history, "k": request.k})
    # Run in background
    task = asyncio.create_task(run_score_job(job_id, model, request))
    running_jobs.add(task)
    task.add_done_callback(running_jobs.discard)
    return {"status": "accepted", "job_id": job_id}

if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)

"""REST surface binding store, gateway and engine into one deployable service.

Every endpoint is a thin adapter over a module operation; no business
logic lives here. Job progress is observable two ways: polling GET
/jobs/{id} and the /jobs/{id}/events SSE stream (state-change events with
replay, so late subscribers and reconnecting clients converge).
"""

from __future__ import annotations

import base64
import json
import logging
import os
import queue
import threading
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Form, Request, UploadFile
from fastapi.responses import JSONResponse, Response, StreamingResponse

from . import degrade, metrics
from .errors import (
    CaptionParseError,
    ConfigError,
    DecodeError,
    IllegalTransition,
    NotFoundError,
    RequestError,
    TransportError,
    ValidationError,
)
from .gateway import BackendDescriptor, InferenceGateway, VramModel, default_mock_backend
from .imaging import load_image, save_png
from .pipeline import PipelineEngine, Stage1Config, Stage2Config
from .prompts import build_caption, build_prompt, facts_from_dict
from .store import JobStore

logger = logging.getLogger(__name__)

ENV_STORE = "UPRES_STORE"
ENV_BACKENDS = "UPRES_BACKENDS"


@dataclass
class ServiceConfig:
    store_path: Path
    backends: list[BackendDescriptor] = field(default_factory=lambda: [default_mock_backend()])
    vram_model: VramModel = field(default_factory=VramModel)
    backend_id: Optional[str] = None  # defaults to the first registered backend
    model_id: str = "flux-dev"
    controlnet_model_id: str = "flux-dev-controlnet-upscaler"
    lora_name: str = "football-lora"
    archive_256: bool = False
    telemetry_period_s: float = 0.0  # 0 -> poll on demand
    console_dist: Optional[Path] = None


def load_config(path: Optional[Path] = None, env: Optional[dict] = None) -> ServiceConfig:
    """Config file (JSON) plus UPRES_STORE / UPRES_BACKENDS overrides."""
    env = dict(os.environ if env is None else env)
    doc: dict = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
    store_path = Path(env.get(ENV_STORE) or doc.get("store") or "./upres-store")
    backends_file = env.get(ENV_BACKENDS) or doc.get("backends_file")
    if backends_file:
        backend_docs = json.loads(Path(backends_file).read_text())
    else:
        backend_docs = doc.get("backends", [])
    backends = [BackendDescriptor.from_dict(b) for b in backend_docs] or [default_mock_backend()]
    vram = VramModel(**doc.get("vram", {}))
    console = doc.get("console_dist")
    return ServiceConfig(
        store_path=store_path,
        backends=backends,
        vram_model=vram,
        backend_id=doc.get("backend_id"),
        model_id=doc.get("model_id", "flux-dev"),
        controlnet_model_id=doc.get("controlnet_model_id", "flux-dev-controlnet-upscaler"),
        lora_name=doc.get("lora_name", "football-lora"),
        archive_256=bool(doc.get("archive_256", False)),
        telemetry_period_s=float(doc.get("telemetry_period_s", 0.0)),
        console_dist=Path(console) if console else None,
    )


class EventHub:
    """Fan-out of engine events to SSE subscribers, one queue per stream."""

    def __init__(self):
        self._subscribers: dict[str, list[queue.Queue]] = {}
        self._lock = threading.Lock()

    def publish(self, job_id: str, event: dict) -> None:
        with self._lock:
            targets = list(self._subscribers.get(job_id, []))
        for q in targets:
            q.put(event)

    def subscribe(self, job_id: str) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._lock:
            self._subscribers.setdefault(job_id, []).append(q)
        return q

    def unsubscribe(self, job_id: str, q: queue.Queue) -> None:
        with self._lock:
            subs = self._subscribers.get(job_id, [])
            if q in subs:
                subs.remove(q)


def _error_payload(code: str, exc: Exception) -> dict:
    payload = {"code": code, "message": str(exc)}
    if isinstance(exc, ValidationError):
        payload["findings"] = exc.findings
    return payload


def _sse_line(event: dict) -> str:
    return f"event: {event.get('type', 'message')}\ndata: {json.dumps(event)}\n\n"


def create_app(config: ServiceConfig) -> FastAPI:
    store = JobStore(config.store_path)
    gateway = InferenceGateway(vram_model=config.vram_model)
    for backend in config.backends:
        gateway.register(backend)
    backend_id = config.backend_id or config.backends[0].id
    engine = PipelineEngine(
        store,
        gateway,
        backend_id=backend_id,
        model_id=config.model_id,
        controlnet_model_id=config.controlnet_model_id,
        lora_name=config.lora_name,
        archive_256=config.archive_256,
    )
    hub = EventHub()
    engine.add_listener(hub.publish)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        recovered = engine.recover()
        if recovered:
            logger.info("recovered %d interrupted job(s): %s", len(recovered), recovered)
        if config.telemetry_period_s > 0:
            gateway.start_polling(config.telemetry_period_s)
        yield
        gateway.stop_polling()

    app = FastAPI(title="upres control service", lifespan=lifespan)
    app.state.engine = engine
    app.state.store = store
    app.state.gateway = gateway
    app.state.hub = hub

    # -- error mapping -------------------------------------------------------

    @app.exception_handler(ValidationError)
    def _validation(request: Request, exc: ValidationError):
        return JSONResponse(status_code=422, content=_error_payload("validation", exc))

    @app.exception_handler(NotFoundError)
    def _not_found(request: Request, exc: NotFoundError):
        return JSONResponse(status_code=404, content=_error_payload("not_found", exc))

    @app.exception_handler(IllegalTransition)
    def _conflict(request: Request, exc: IllegalTransition):
        return JSONResponse(status_code=409, content=_error_payload("illegal_transition", exc))

    @app.exception_handler(DecodeError)
    def _decode(request: Request, exc: DecodeError):
        return JSONResponse(status_code=400, content=_error_payload("decode", exc))

    @app.exception_handler(ConfigError)
    def _config(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content=_error_payload("config", exc))

    @app.exception_handler(CaptionParseError)
    def _caption(request: Request, exc: CaptionParseError):
        return JSONResponse(status_code=400, content=_error_payload("parse", exc))

    @app.exception_handler(ValueError)
    def _value(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content=_error_payload("invalid_argument", exc))

    @app.exception_handler(TransportError)
    def _transport(request: Request, exc: TransportError):
        return JSONResponse(status_code=502, content=_error_payload("transport", exc))

    @app.exception_handler(RequestError)
    def _request(request: Request, exc: RequestError):
        return JSONResponse(status_code=502, content=_error_payload("backend_request", exc))

    # -- jobs -----------------------------------------------------------------

    @app.get("/health")
    def health():
        return {"status": "ok", "backend": backend_id}

    @app.post("/jobs", status_code=201)
    async def create_job(
        image: UploadFile,
        facts: str = Form(...),
        stage1: Optional[str] = Form(None),
        stage2: Optional[str] = Form(None),
        branches: Optional[str] = Form(None),
    ):
        image_bytes = await image.read()
        parsed_facts = facts_from_dict(json.loads(facts))
        stage1_cfg = Stage1Config(**json.loads(stage1)) if stage1 else None
        stage2_cfg = Stage2Config(**json.loads(stage2)) if stage2 else None
        branch_doc = json.loads(branches) if branches else {}
        job = engine.create_job(
            image_bytes,
            parsed_facts,
            stage1=stage1_cfg,
            stage2=stage2_cfg,
            stage1_branches=branch_doc.get("stage1"),
            stage2_branches=branch_doc.get("stage2"),
        )
        return job.to_dict()

    @app.get("/jobs")
    def list_jobs():
        return [job.to_dict() for job in engine.list_jobs()]

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        return engine.get_job(job_id).to_dict()

    @app.post("/jobs/{job_id}/preprocess")
    def preprocess(job_id: str):
        return engine.preprocess(job_id).to_dict()

    def _run_async(target, *args) -> None:
        def wrapper():
            try:
                target(*args)
            except Exception:
                logger.exception("background stage run failed")

        threading.Thread(target=wrapper, daemon=True).start()

    @app.post("/jobs/{job_id}/stage1")
    def run_stage1(job_id: str, body: Optional[dict] = None):
        wait = True if body is None else bool(body.get("wait", True))
        if wait:
            return engine.run_stage1(job_id).to_dict()
        engine.get_job(job_id)  # 404 before detaching
        _run_async(engine.run_stage1, job_id)
        return JSONResponse(status_code=202, content={"id": job_id, "accepted": "stage1"})

    @app.post("/jobs/{job_id}/stage2")
    def run_stage2(job_id: str, body: Optional[dict] = None):
        body = body or {}
        control = body.get("control_candidate")
        wait = bool(body.get("wait", True))
        if wait:
            return engine.run_stage2(job_id, control).to_dict()
        engine.get_job(job_id)
        _run_async(engine.run_stage2, job_id, control)
        return JSONResponse(status_code=202, content={"id": job_id, "accepted": "stage2"})

    @app.post("/jobs/{job_id}/select")
    def select(job_id: str, body: dict):
        return engine.select_candidate(
            job_id, int(body["stage"]), str(body["branch"]), str(body["candidate"])
        ).to_dict()

    @app.post("/jobs/{job_id}/retry")
    def retry(job_id: str):
        return engine.retry(job_id).to_dict()

    @app.get("/candidates/{digest}")
    def candidate(digest: str):
        return Response(content=store.get_blob(digest), media_type="image/png")

    @app.get("/jobs/{job_id}/events")
    def events(job_id: str, replay_only: bool = False, idle_timeout_s: float = 10.0):
        job = engine.get_job(job_id)

        def stream():
            q = hub.subscribe(job_id)
            try:
                for entry in job.state_log:
                    yield _sse_line({"type": "state", **entry})
                if replay_only:
                    return
                while True:
                    try:
                        event = q.get(timeout=idle_timeout_s)
                    except queue.Empty:
                        return
                    yield _sse_line(event)
            finally:
                hub.unsubscribe(job_id, q)

        return StreamingResponse(stream(), media_type="text/event-stream")

    # -- backends ---------------------------------------------------------------

    @app.get("/backends")
    def backends():
        return [
            {**backend.to_dict(), "in_flight": gateway.in_flight(backend.id)}
            for backend in gateway.backends()
        ]

    @app.get("/backends/{bid}/telemetry")
    def telemetry(bid: str, limit: int = 100):
        if config.telemetry_period_s <= 0:
            gateway.poll_once(bid)
        samples = gateway.telemetry(bid)[-limit:]
        return {"backend": bid, "samples": [s.to_dict() for s in samples]}

    # -- desk tools ----------------------------------------------------------------

    @app.post("/fixtures")
    def make_fixture(body: dict):
        spec = degrade.DegradationSpec.from_dict(body.get("spec", {}))
        if "ground_truth" in body:
            gt = load_image(base64.b64decode(body["ground_truth"]))
        else:
            side = int(body.get("synthetic_side", 1024))
            gt = _synthetic_ground_truth(side, spec.seed)
        degraded, manifest = degrade.synthesize_fixture(gt, spec)
        return {
            "ground_truth": store.put_blob(save_png(gt)),
            "degraded": store.put_blob(save_png(degraded)),
            "manifest": manifest,
        }

    @app.post("/score")
    def score(body: dict):
        gt = None
        if body.get("ground_truth"):
            gt = load_image(base64.b64decode(body["ground_truth"]))
        candidates = [
            (str(c["id"]), load_image(base64.b64decode(c["image"])))
            for c in body.get("candidates", [])
        ]
        return metrics.compare_report(candidates, ground_truth=gt).to_dict()

    @app.post("/prompt/preview")
    def prompt_preview(body: dict):
        facts = facts_from_dict(body)
        return {"prompt": build_prompt(facts), "caption": build_caption(facts)}

    if config.console_dist and config.console_dist.is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=config.console_dist, html=True), name="console")

    return app


def _synthetic_ground_truth(side: int, seed: int):
    """Procedural pitch-like scene; deterministic on (side, seed)."""
    import numpy as np

    from .imaging import ImageBuffer

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, side])))
    y, x = np.mgrid[0:side, 0:side] / side
    grass = np.stack([0.15 + 0.1 * np.sin(12 * np.pi * y), 0.45 + 0.1 * np.sin(10 * np.pi * x), 0.2 * np.ones_like(x)], axis=-1)
    stripes = (np.floor(x * 8) % 2)[..., None] * np.array([0.6, 0.1, 0.1])
    blobs = rng.random((side, side, 3)) * 0.15
    return ImageBuffer(np.clip(grass + 0.4 * stripes + blobs, 0.0, 1.0))


def serve(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8765) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=host, port=port, log_level="info")

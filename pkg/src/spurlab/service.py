"""HTTP service over session state: analyze, browse, annotate, retrain.

JSON-over-HTTP with a schema version header on every response.  Each
session is a directory under the data root; mutations are serialized per
session, retraining runs on a background thread with status polling, and
any number of sessions can be served at once.
"""

from __future__ import annotations

import re
import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .enhancement import EnhancementConfig
from .fcn import FcnConfig, TrainConfig
from .session import (
    SCHEMA_VERSION,
    AnalysisConfig,
    JobConflict,
    Session,
    SessionError,
)

SESSION_DIR_RE = re.compile(r"^s(\d{4})$")


class TrainBody(BaseModel):
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.05, ge=0)
    lr_decay: float = Field(default=0.95, gt=0, le=1)
    seed: int = 0


class ModelBody(BaseModel):
    conv_blocks: list[tuple[int, int]] = [(16, 9), (32, 5), (16, 3)]
    use_batch_norm: bool = True
    seed: int = 0


class CreateSessionBody(BaseModel):
    dataset_path: str
    alpha: float = Field(default=0.5, ge=0.0, le=1.0)
    seed: int = 0
    band: Optional[int] = Field(default=None, ge=1)
    k: Optional[int] = Field(default=None, ge=1)
    k_max: int = Field(default=10, ge=3)
    model_checkpoint: Optional[str] = None
    model: Optional[ModelBody] = None
    train: Optional[TrainBody] = None


class AnnotationBody(BaseModel):
    target: str
    id: str
    label: str


class RetrainBody(BaseModel):
    noise_scale: float = Field(default=0.5, gt=0)
    tau_s: float = Field(default=0.7, gt=0, le=1)
    tau_c: float = Field(default=0.3, ge=0)
    seed: int = 0
    finetune: Optional[TrainBody] = None


class SessionManager:
    def __init__(self, data_root: Path):
        self.data_root = Path(data_root)
        self.data_root.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.lock = threading.Lock()

    def next_id(self) -> str:
        highest = 0
        for p in self.data_root.iterdir() if self.data_root.exists() else []:
            m = SESSION_DIR_RE.match(p.name)
            if m:
                highest = max(highest, int(m.group(1)))
        return f"s{highest + 1:04d}"

    def get(self, session_id: str) -> Session:
        with self.lock:
            if session_id in self.sessions:
                return self.sessions[session_id]
            root = self.data_root / session_id
            if not (root / "meta.json").exists():
                raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
            sess = Session.load(root, session_id)
            self.sessions[session_id] = sess
            return sess


def create_app(data_root) -> FastAPI:
    app = FastAPI(title="spurlab service")
    manager = SessionManager(Path(data_root))
    app.state.manager = manager

    @app.middleware("http")
    async def schema_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["X-Schema-Version"] = str(SCHEMA_VERSION)
        return response

    def _http_error(e: Exception) -> HTTPException:
        if isinstance(e, JobConflict):
            return HTTPException(status_code=409, detail=str(e))
        if isinstance(e, SessionError):
            msg = str(e)
            code = 404 if "unknown" in msg else 400
            return HTTPException(status_code=code, detail=msg)
        return HTTPException(status_code=500, detail=str(e))

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        with manager.lock:
            session_id = manager.next_id()
            root = manager.data_root / session_id
            root.mkdir()
        try:
            cfg = AnalysisConfig(alpha=body.alpha, band=body.band, k=body.k,
                                 k_max=body.k_max, seed=body.seed)
            model_cfg = None
            if body.model is not None:
                model_cfg = FcnConfig(
                    conv_blocks=tuple(tuple(b) for b in body.model.conv_blocks),
                    use_batch_norm=body.model.use_batch_norm,
                    seed=body.model.seed,
                )
            train_cfg = None
            if body.train is not None:
                train_cfg = TrainConfig(**body.train.model_dump())
            sess = Session.create(
                root, session_id, body.dataset_path, cfg,
                model_checkpoint=body.model_checkpoint,
                model_cfg=model_cfg, train_cfg=train_cfg,
            )
        except (SessionError, ValueError) as e:
            raise _http_error(e if isinstance(e, SessionError) else SessionError(str(e)))
        with manager.lock:
            manager.sessions[session_id] = sess
        return {
            "session_id": session_id,
            "k": sess.meta["k"],
            "status": sess.meta["job"]["status"],
            "n_selected": len(sess.analysis_doc["selected_ids"]),
        }

    @app.get("/sessions/{session_id}/clusters")
    def get_clusters(session_id: str, sort: str = "cluster_id"):
        sess = manager.get(session_id)
        try:
            return {"clusters": sess.cluster_report(sort_by=sort)}
        except SessionError as e:
            code = 409 if "annotation" in str(e) else 400
            raise HTTPException(status_code=code, detail=str(e))

    @app.get("/sessions/{session_id}/embedding")
    def get_embedding(session_id: str):
        return manager.get(session_id).embedding_report()

    @app.get("/sessions/{session_id}/clusters/{cluster_id}/instances")
    def get_instances(session_id: str, cluster_id: int):
        sess = manager.get(session_id)
        try:
            return {"instances": sess.instances_report(cluster_id)}
        except SessionError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.post("/sessions/{session_id}/annotations")
    def post_annotation(session_id: str, body: AnnotationBody):
        sess = manager.get(session_id)
        try:
            with sess.lock:
                result = sess.annotate(body.target, body.id, body.label)
        except (SessionError, JobConflict) as e:
            raise _http_error(e)
        return result

    @app.post("/sessions/{session_id}/retrain")
    def post_retrain(session_id: str, body: RetrainBody):
        sess = manager.get(session_id)
        ft = TrainConfig(**body.finetune.model_dump()) if body.finetune else TrainConfig(
            epochs=20, learning_rate=0.005)
        cfg = EnhancementConfig(noise_scale=body.noise_scale, finetune=ft,
                                tau_s=body.tau_s, tau_c=body.tau_c, seed=body.seed)
        try:
            with sess.lock:
                job_id = sess.start_retrain(cfg)
        except (SessionError, JobConflict) as e:
            raise _http_error(e)

        def _worker():
            try:
                sess.run_retrain(cfg, job_id)
            except Exception:
                pass  # failure already persisted in meta by run_retrain

        threading.Thread(target=_worker, daemon=True).start()
        return {"job_id": job_id, "status": "retraining"}

    @app.get("/sessions/{session_id}/jobs/current")
    def get_job(session_id: str):
        return manager.get(session_id).meta["job"]

    @app.get("/sessions/{session_id}/metrics")
    def get_metrics(session_id: str):
        return {"history": manager.get(session_id).meta["metrics_history"]}

    ui_dist = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if ui_dist.exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dist, html=True), name="ui")

    return app

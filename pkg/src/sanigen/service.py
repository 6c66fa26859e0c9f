"""The device-to-server HTTP service.

Exposes job submission (``POST /v1/jobs``), job status
(``GET /v1/jobs/{id}``), artifact retrieval (``GET /v1/artifacts/{addr}``)
and the backend protocol under ``/v1/backend/*``.  Each accepted bundle is
processed by a worker thread: plan, fine-tune, generate, train, evaluate,
then publish artifacts.  Jobs persist in an embedded sqlite store so
queued work resumes after a restart.

The server never receives raw reference images (only sanitized bundles)
and never logs payload bytes — log lines carry identifiers and sizes only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import queue
import threading
import uuid
from contextlib import asynccontextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from . import orchestrator, utility, wire
from .backends import Backend, get_backend
from .errors import InvalidArgumentError, SanigenError, SchemaError
from .store import ServerStore

log = logging.getLogger("sanigen.service")

ENV_PREFIX = "SANIGEN_"


@dataclass
class ServiceConfig:
    """Server settings; a JSON config file plus SANIGEN_* env overrides."""

    host: str = "127.0.0.1"
    port: int = 8787
    data_dir: str = "./sanigen-data"
    backend: str = "mock"
    max_bundle_bytes: int = 64 * 1024 * 1024
    samples_per_class: int = 8
    train_fraction: float = 0.8
    seed: int = 0

    @classmethod
    def load(cls, path: str | Path | None = None, env: dict | None = None) -> "ServiceConfig":
        values: dict = {}
        if path is not None:
            values.update(json.loads(Path(path).read_text()))
        env = os.environ if env is None else env
        for f in fields(cls):
            key = ENV_PREFIX + f.name.upper()
            if key in env:
                values[f.name] = env[key]
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**values)
        cfg.port = int(cfg.port)
        cfg.max_bundle_bytes = int(cfg.max_bundle_bytes)
        cfg.samples_per_class = int(cfg.samples_per_class)
        cfg.train_fraction = float(cfg.train_fraction)
        cfg.seed = int(cfg.seed)
        return cfg


_STATUS_BY_CODE = {
    "schema": 422,
    "invalid-argument": 422,
    "dimension-mismatch": 422,
    "not-found": 404,
    "backend-unavailable": 503,
}


def _error_response(exc: SanigenError, status: int | None = None) -> JSONResponse:
    status = status or _STATUS_BY_CODE.get(exc.code, 500)
    body = {"error": {"code": exc.code, "message": str(exc), "retryable": exc.retryable}}
    if isinstance(exc, SchemaError) and exc.field:
        body["error"]["field"] = exc.field
    return JSONResponse(body, status_code=status)


class JobWorker:
    """Single background thread draining the job queue."""

    def __init__(self, store: ServerStore, backend: Backend, config: ServiceConfig):
        self.store = store
        self.backend = backend
        self.config = config
        self.queue: queue.Queue[str | None] = queue.Queue()
        self.thread: threading.Thread | None = None

    def start(self) -> None:
        for job_id in self.store.pending_job_ids():
            self.queue.put(job_id)
        self.thread = threading.Thread(target=self._run, name="sanigen-job-worker", daemon=True)
        self.thread.start()

    def stop(self) -> None:
        self.queue.put(None)
        if self.thread is not None:
            self.thread.join(timeout=30)

    def submit(self, job_id: str) -> None:
        self.queue.put(job_id)

    def _run(self) -> None:
        while True:
            job_id = self.queue.get()
            if job_id is None:
                return
            try:
                self._process(job_id)
            except Exception as exc:
                log.exception("job %s failed", job_id)
                try:
                    self.store.transition(job_id, "failed", error=f"{exc}")
                except Exception:
                    pass

    def _process(self, job_id: str) -> None:
        store, config = self.store, self.config
        bundle = wire.parse_bundle(store.job_bundle(job_id))
        store.transition(job_id, "sanitizing-received")
        log.info("job %s: bundle with %d image entries accepted", job_id, len(bundle.images))

        plan = orchestrator.plan_fine_tune(bundle)
        store.transition(job_id, "fine_tuning")
        model_refs = orchestrator.prepare_models(plan, self.backend, seed=bundle.seed)
        log.info(
            "job %s: models prepared (%s)",
            job_id,
            {r.key(len(bundle.request.target_objects)): ref for r, ref in model_refs.items()},
        )

        store.transition(job_id, "generating")
        dataset = orchestrator.assemble_dataset(
            bundle.request,
            plan,
            self.backend,
            config.samples_per_class,
            seed=bundle.seed,
            canvas_size=(bundle.width, bundle.height),
            model_refs=model_refs,
        )
        log.info("job %s: generated %d samples", job_id, len(dataset))

        store.transition(job_id, "training")
        train_set, val_set = utility.split_dataset(dataset, config.train_fraction, seed=bundle.seed)
        report, train_result = utility.train_and_evaluate(
            train_set, val_set, val_set, self.backend
        )

        store.transition(job_id, "evaluating")
        report.provenance["train_fraction"] = config.train_fraction
        report.provenance["preference"] = plan.preference
        artifacts = [
            store.put_artifact(
                "dataset", "application/zip", wire.dataset_to_zip_bytes(dataset)
            ),
            store.put_artifact(
                "utility_report",
                "application/json",
                wire.canonical_json(
                    wire.utility_report_to_doc(report).model_dump(mode="json")
                ).encode(),
            ),
        ]
        if train_result.weights:
            artifacts.append(
                store.put_artifact("model_weights", "application/octet-stream", train_result.weights)
            )
        store.transition(job_id, "done", artifacts=artifacts)
        log.info("job %s: done (%d artifacts)", job_id, len(artifacts))


def _mount_backend_routes(app: FastAPI, backend: Backend) -> None:
    from .imaging import decode_png, encode_png

    def png_in(b64: str):
        return decode_png(wire.b64decode_str(b64))

    def png_out(img) -> str:
        return wire.b64encode_bytes(encode_png(img))

    @app.get("/v1/backend/capabilities")
    def capabilities():
        caps = backend.capabilities()
        return {
            "provider": caps.provider,
            "deterministic": caps.deterministic,
            "endpoints": list(caps.endpoints),
        }

    @app.post("/v1/backend/fine_tune")
    def fine_tune(body: wire.FineTuneBody):
        refs = [png_in(r) for r in body.references]
        model_ref = backend.fine_tune(body.role, refs, body.config)
        return {"request_id": body.request_id, "model_ref": model_ref}

    @app.post("/v1/backend/generate")
    def generate(body: wire.GenerateBody):
        image, alpha = backend.generate(body.model_ref, body.prompt, body.seed, body.want_alpha)
        return {
            "request_id": body.request_id,
            "image": png_out(image),
            "alpha": png_out(alpha) if alpha is not None else None,
        }

    @app.post("/v1/backend/condition_generate")
    def condition_generate(body: wire.ConditionGenerateBody):
        images = backend.condition_generate(
            [png_in(f) for f in body.features], body.prompt, body.seed, body.count
        )
        return {"request_id": body.request_id, "images": [png_out(i) for i in images]}

    @app.post("/v1/backend/inpaint")
    def inpaint(body: wire.InpaintBody):
        mask = png_in(body.mask) != 0
        if mask.ndim == 3:
            mask = mask.any(axis=2)
        image = backend.inpaint(body.model_ref, png_in(body.canvas), mask, body.prompt, body.seed)
        return {"request_id": body.request_id, "image": png_out(image)}

    @app.post("/v1/backend/embed")
    def embed(body: wire.EmbedBody):
        if (body.images is None) == (body.texts is None):
            raise SchemaError("embed takes exactly one of images or texts", field="images")
        if body.images is not None:
            vectors = backend.embed_images([png_in(i) for i in body.images])
        else:
            vectors = [backend.embed_text(t) for t in body.texts]
        return {
            "request_id": body.request_id,
            "vectors": [
                {
                    "provider_id": v.provider_id,
                    "dimension": v.dimension,
                    "values": [float(x) for x in v.values],
                }
                for v in vectors
            ],
        }

    @app.post("/v1/backend/segment")
    def segment(body: wire.SegmentBody):
        results = backend.segment(png_in(body.image), body.targets)
        return {
            "request_id": body.request_id,
            "masks": [png_out(mask) for mask, _ in results],
            "confidences": [conf for _, conf in results],
        }

    @app.post("/v1/backend/train")
    def train(body: wire.TrainBody):
        train_set, val_set = wire.dataset_splits_from_zip_bytes(wire.b64decode_str(body.dataset))
        result = backend.train(train_set, val_set, body.config)
        return {
            "request_id": body.request_id,
            "model_ref": result.model_ref,
            "epoch_scores": result.epoch_scores,
            "weights": wire.b64encode_bytes(result.weights) if result.weights else None,
        }

    @app.post("/v1/backend/predict")
    def predict(body: wire.PredictBody):
        images = [png_in(i) for i in body.images]
        if body.task == "classification":
            preds = backend.predict_classes(body.model_ref, images)
            payload = [{"class_id": c, "confidence": conf} for c, conf in preds]
        else:
            detections = backend.predict_detections(body.model_ref, images)
            payload = [
                [
                    {
                        "x": d.bbox.x,
                        "y": d.bbox.y,
                        "w": d.bbox.w,
                        "h": d.bbox.h,
                        "class_id": d.class_id,
                        "confidence": d.confidence,
                    }
                    for d in per_image
                ]
                for per_image in detections
            ]
        return {"request_id": body.request_id, "predictions": payload}


def create_app(config: ServiceConfig | None = None, backend: Backend | None = None) -> FastAPI:
    config = config or ServiceConfig.load()
    data_dir = Path(config.data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    store = ServerStore(data_dir)
    backend = backend or get_backend(config.backend)

    handler = logging.FileHandler(data_dir / "server.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)

    worker = JobWorker(store, backend, config)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        worker.start()
        try:
            yield
        finally:
            worker.stop()
            log.removeHandler(handler)
            handler.close()
            store.close()

    app = FastAPI(title="sanigen", lifespan=lifespan)
    app.state.store = store
    app.state.config = config
    app.state.backend = backend
    app.state.worker = worker

    @app.exception_handler(SanigenError)
    async def sanigen_error_handler(request: Request, exc: SanigenError):
        return _error_response(exc)

    @app.post("/v1/jobs", status_code=201)
    async def submit_job(request: Request):
        body = await request.body()
        if len(body) > config.max_bundle_bytes:
            return _error_response(
                SchemaError(
                    f"bundle of {len(body)} bytes exceeds the {config.max_bundle_bytes} byte limit"
                ),
                status=413,
            )
        bundle = wire.parse_bundle(body)
        canonical = wire.dump_bundle(bundle)
        key = request.headers.get("Idempotency-Key")
        if key:
            existing = store.find_by_idempotency_key(key)
            if existing is not None:
                job, body_digest = existing
                if body_digest != hashlib.sha256(canonical.encode()).hexdigest():
                    return _error_response(
                        InvalidArgumentError(
                            "idempotency key was already used with a different bundle"
                        ),
                        status=409,
                    )
                return JSONResponse(job.to_doc(), status_code=200)
        job = store.create_job(uuid.uuid4().hex, canonical, key)
        log.info("job %s: queued (%d byte bundle)", job.id, len(body))
        worker.submit(job.id)
        return JSONResponse(job.to_doc(), status_code=201)

    @app.get("/v1/jobs/{job_id}")
    def job_status(job_id: str):
        return store.get_job(job_id).to_doc()

    @app.get("/v1/artifacts/{address}")
    def get_artifact(address: str):
        data, media_type, _ = store.get_artifact(address)
        return Response(content=data, media_type=media_type)

    _mount_backend_routes(app, backend)
    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")

"""The adapter's HTTP surface: the backend protocol under ``/v1/backend/*``.

Every response echoes the caller's request id; failures return the
structured envelope ``{"error": {"code", "message", "retryable"}}``.
Generation and inpainting are deterministic for a fixed
(model_ref, prompt, seed), and the capability document says so.
"""

from __future__ import annotations

import base64
import logging
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from .config import AdapterConfig
from .engines.embedding import DescriptorEmbedder
from .engines.generation import SpectralGenerator
from .engines.segmentation import GrabCutSegmenter
from .engines.training import TorchTrainer
from .raster import ProtocolError, decode_png_b64, encode_png_b64, read_dataset_zip

log = logging.getLogger("modelhost")

PROVIDER = "modelhost-classic-v1"

ENDPOINTS = (
    "fine_tune",
    "generate",
    "condition_generate",
    "inpaint",
    "embed",
    "segment",
    "train",
    "predict",
)


class _Body(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class FineTuneBody(_Body):
    request_id: str = ""
    role: str
    references: list[str] = Field(min_length=1)
    config: dict = Field(default_factory=dict)


class GenerateBody(_Body):
    request_id: str = ""
    model_ref: str
    prompt: str
    seed: int
    want_alpha: bool = False


class ConditionGenerateBody(_Body):
    request_id: str = ""
    features: list[str] = Field(min_length=1)
    prompt: str
    seed: int
    count: int = Field(ge=1)


class InpaintBody(_Body):
    request_id: str = ""
    model_ref: str
    canvas: str
    mask: str
    prompt: str
    seed: int


class EmbedBody(_Body):
    request_id: str = ""
    images: Optional[list[str]] = None
    texts: Optional[list[str]] = None


class SegmentBody(_Body):
    request_id: str = ""
    image: str
    targets: list[str] = Field(min_length=1)


class TrainBody(_Body):
    request_id: str = ""
    dataset: str
    config: dict = Field(default_factory=dict)


class PredictBody(_Body):
    request_id: str = ""
    model_ref: str
    task: Literal["classification", "detection"]
    images: list[str]


def _mask_from(b64: str) -> np.ndarray:
    arr = decode_png_b64(b64)
    mask = arr != 0 if arr.ndim == 2 else np.any(arr[:, :, :3] != 0, axis=2)
    return mask


def create_app(config: AdapterConfig | None = None) -> FastAPI:
    config = config or AdapterConfig()
    generator = SpectralGenerator(
        config.generation_model, inpaint_merge_ratio=config.inpaint_merge_ratio
    )
    embedder = DescriptorEmbedder(PROVIDER)
    segmenter = GrabCutSegmenter(config.segmentation_model)
    trainer = TorchTrainer(config.training_model, config.device)

    app = FastAPI(title="modelhost")

    @app.exception_handler(ProtocolError)
    async def protocol_error_handler(request: Request, exc: ProtocolError):
        status = 404 if exc.code == "unknown-model" else 422
        return JSONResponse(
            {"error": {"code": exc.code, "message": str(exc), "retryable": exc.retryable}},
            status_code=status,
        )

    @app.exception_handler(Exception)
    async def internal_error_handler(request: Request, exc: Exception):
        log.exception("internal error")
        return JSONResponse(
            {"error": {"code": "internal", "message": str(exc), "retryable": True}},
            status_code=500,
        )

    @app.get("/v1/backend/capabilities")
    def capabilities():
        return {
            "provider": PROVIDER,
            "deterministic": True,
            "endpoints": list(ENDPOINTS),
            "models": config.model_ids(),
        }

    @app.post("/v1/backend/fine_tune")
    def fine_tune(body: FineTuneBody):
        references = [decode_png_b64(r) for r in body.references]
        merged_config = {**config.fine_tune, **body.config}
        model_ref = generator.fine_tune(body.role, references, merged_config)
        return {"request_id": body.request_id, "model_ref": model_ref}

    @app.post("/v1/backend/generate")
    def generate(body: GenerateBody):
        image, alpha = generator.generate(body.model_ref, body.prompt, body.seed, body.want_alpha)
        return {
            "request_id": body.request_id,
            "image": encode_png_b64(image),
            "alpha": encode_png_b64(alpha) if alpha is not None else None,
        }

    @app.post("/v1/backend/condition_generate")
    def condition_generate(body: ConditionGenerateBody):
        images = generator.condition_generate(
            [decode_png_b64(f) for f in body.features], body.prompt, body.seed, body.count
        )
        return {"request_id": body.request_id, "images": [encode_png_b64(i) for i in images]}

    @app.post("/v1/backend/inpaint")
    def inpaint(body: InpaintBody):
        image = generator.inpaint(
            body.model_ref,
            decode_png_b64(body.canvas),
            _mask_from(body.mask),
            body.prompt,
            body.seed,
        )
        return {"request_id": body.request_id, "image": encode_png_b64(image)}

    @app.post("/v1/backend/embed")
    def embed(body: EmbedBody):
        if (body.images is None) == (body.texts is None):
            raise ProtocolError("embed takes exactly one of images or texts")
        if body.images is not None:
            vectors = [embedder.embed_image(decode_png_b64(i)) for i in body.images]
        else:
            vectors = [embedder.embed_text(t) for t in body.texts]
        return {
            "request_id": body.request_id,
            "vectors": [
                {
                    "provider_id": embedder.provider_id,
                    "dimension": int(v.size),
                    "values": [float(x) for x in v],
                }
                for v in vectors
            ],
        }

    @app.post("/v1/backend/segment")
    def segment(body: SegmentBody):
        results = segmenter.segment(decode_png_b64(body.image), body.targets)
        return {
            "request_id": body.request_id,
            "masks": [encode_png_b64(mask) for mask, _ in results],
            "confidences": [conf for _, conf in results],
        }

    @app.post("/v1/backend/train")
    def train(body: TrainBody):
        try:
            payload = base64.b64decode(body.dataset.encode("ascii"), validate=True)
        except Exception as exc:
            raise ProtocolError(f"dataset is not valid base64: {exc}") from exc
        dataset = read_dataset_zip(payload)
        model_ref, scores, weights = trainer.train(dataset, body.config)
        return {
            "request_id": body.request_id,
            "model_ref": model_ref,
            "epoch_scores": scores,
            "weights": base64.b64encode(weights).decode("ascii"),
        }

    @app.post("/v1/backend/predict")
    def predict(body: PredictBody):
        images = [decode_png_b64(i) for i in body.images]
        if body.task == "classification":
            predictions = [
                {"class_id": c, "confidence": round(conf, 6)}
                for c, conf in trainer.predict_classes(body.model_ref, images)
            ]
        else:
            predictions = trainer.predict_detections(body.model_ref, images)
        return {"request_id": body.request_id, "predictions": predictions}

    return app


def serve(config: AdapterConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")

"""Generation/training backend interface and the HTTP client adapter.

The orchestrator and evaluator talk to any implementation of
:class:`Backend`: the in-process deterministic mock (``mock_backend``), or
a remote service speaking the ``/v1/backend/*`` wire contract via
:class:`HttpBackend`.  Remote backends must return structured error
envelopes ``{code, message, retryable}`` and declare nondeterminism in
their capability flags.
"""

from __future__ import annotations

import abc
import base64
import uuid
from collections.abc import Sequence
from dataclasses import dataclass

import httpx
import numpy as np

from .dataset import BBox, Detection, SyntheticDataset
from .errors import (
    BackendUnavailableError,
    GenerationFailedError,
    SanigenError,
    TrainingFailedError,
)
from .imaging import decode_png, encode_png
from .privacy import EmbeddingVector

#: Diffusion fine-tuning settings forwarded verbatim to the backend.
DIFFUSION_FINE_TUNE_DEFAULTS = {
    "learning_rate": 2e-6,
    "special_token": "xyz->style",
    "prior_loss_weight": 0.01,
    "gradient_accumulation_steps": 2,
    "max_steps": 800,
}

#: Specialized-model training settings forwarded verbatim to the backend.
CLASSIFIER_TRAIN_DEFAULTS = {"learning_rate": 1e-3, "batch_size": 128, "epochs": 5}
DETECTOR_TRAIN_DEFAULTS = {"learning_rate": 1e-2, "batch_size": 16, "epochs": 5}


@dataclass(frozen=True)
class BackendCapabilities:
    provider: str
    deterministic: bool
    endpoints: tuple[str, ...]


@dataclass
class TrainResult:
    model_ref: str
    epoch_scores: list[float]
    weights: bytes | None = None


class Backend(abc.ABC):
    """Everything a generation + training backend must provide."""

    @abc.abstractmethod
    def capabilities(self) -> BackendCapabilities: ...

    @abc.abstractmethod
    def fine_tune(self, role_key: str, references: Sequence[np.ndarray], config: dict) -> str: ...

    @abc.abstractmethod
    def generate(
        self, model_ref: str, prompt: str, seed: int, want_alpha: bool = False
    ) -> tuple[np.ndarray, np.ndarray | None]: ...

    @abc.abstractmethod
    def condition_generate(
        self, features: Sequence[np.ndarray], prompt: str, seed: int, count: int
    ) -> list[np.ndarray]: ...

    @abc.abstractmethod
    def inpaint(
        self, model_ref: str, canvas: np.ndarray, mask: np.ndarray, prompt: str, seed: int
    ) -> np.ndarray: ...

    @abc.abstractmethod
    def embed_images(self, images: Sequence[np.ndarray]) -> list[EmbeddingVector]: ...

    @abc.abstractmethod
    def embed_text(self, text: str) -> EmbeddingVector: ...

    @abc.abstractmethod
    def segment(
        self, image: np.ndarray, targets: Sequence[str]
    ) -> list[tuple[np.ndarray, float]]: ...

    @abc.abstractmethod
    def train(
        self, train_set: SyntheticDataset, validation_set: SyntheticDataset, config: dict
    ) -> TrainResult: ...

    @abc.abstractmethod
    def predict_classes(
        self, model_ref: str, images: Sequence[np.ndarray]
    ) -> list[tuple[str, float]]: ...

    @abc.abstractmethod
    def predict_detections(
        self, model_ref: str, images: Sequence[np.ndarray]
    ) -> list[list[Detection]]: ...


class HttpBackend(Backend):
    """Client for a remote backend service mounted at ``<base>/v1/backend``."""

    def __init__(self, base_url: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout)

    def close(self) -> None:
        self._client.close()

    def _call(self, endpoint: str, body: dict, error_cls: type[SanigenError]) -> dict:
        body = dict(body, request_id=str(uuid.uuid4()))
        try:
            resp = self._client.post(f"/v1/backend/{endpoint}", json=body)
        except httpx.HTTPError as exc:
            raise BackendUnavailableError(f"backend {endpoint} unreachable: {exc}") from exc
        if resp.status_code >= 400:
            detail = {}
            try:
                detail = resp.json().get("error", {})
            except ValueError:
                pass
            code = detail.get("code", "error")
            message = detail.get("message", resp.text[:200])
            raise error_cls(f"backend {endpoint} failed ({code}): {message}")
        return resp.json()

    def capabilities(self) -> BackendCapabilities:
        try:
            resp = self._client.get("/v1/backend/capabilities")
            resp.raise_for_status()
        except httpx.HTTPError as exc:
            raise BackendUnavailableError(f"backend capabilities unreachable: {exc}") from exc
        doc = resp.json()
        return BackendCapabilities(
            provider=doc["provider"],
            deterministic=bool(doc["deterministic"]),
            endpoints=tuple(doc["endpoints"]),
        )

    def fine_tune(self, role_key, references, config):
        body = {
            "role": role_key,
            "references": [_b64(encode_png(r)) for r in references],
            "config": dict(config),
        }
        return self._call("fine_tune", body, GenerationFailedError)["model_ref"]

    def generate(self, model_ref, prompt, seed, want_alpha=False):
        body = {"model_ref": model_ref, "prompt": prompt, "seed": int(seed), "want_alpha": want_alpha}
        doc = self._call("generate", body, GenerationFailedError)
        alpha = doc.get("alpha")
        image = decode_png(_unb64(doc["image"]))
        return image, (decode_png(_unb64(alpha)) != 0 if alpha else None)

    def condition_generate(self, features, prompt, seed, count):
        body = {
            "features": [_b64(encode_png(f)) for f in features],
            "prompt": prompt,
            "seed": int(seed),
            "count": int(count),
        }
        doc = self._call("condition_generate", body, GenerationFailedError)
        return [decode_png(_unb64(i)) for i in doc["images"]]

    def inpaint(self, model_ref, canvas, mask, prompt, seed):
        body = {
            "model_ref": model_ref,
            "canvas": _b64(encode_png(canvas)),
            "mask": _b64(encode_png(mask)),
            "prompt": prompt,
            "seed": int(seed),
        }
        return decode_png(_unb64(self._call("inpaint", body, GenerationFailedError)["image"]))

    def embed_images(self, images):
        body = {"images": [_b64(encode_png(i)) for i in images]}
        doc = self._call("embed", body, BackendUnavailableError)
        return [
            EmbeddingVector(np.asarray(v["values"], dtype=np.float64), v["provider_id"])
            for v in doc["vectors"]
        ]

    def embed_text(self, text):
        doc = self._call("embed", {"texts": [text]}, BackendUnavailableError)
        v = doc["vectors"][0]
        return EmbeddingVector(np.asarray(v["values"], dtype=np.float64), v["provider_id"])

    def segment(self, image, targets):
        body = {"image": _b64(encode_png(image)), "targets": list(targets)}
        doc = self._call("segment", body, BackendUnavailableError)
        return [
            (decode_png(_unb64(m)) != 0, float(c))
            for m, c in zip(doc["masks"], doc["confidences"])
        ]

    def train(self, train_set, validation_set, config):
        from . import wire

        body = {
            "dataset": _b64(wire.dataset_splits_to_zip_bytes(train_set, validation_set)),
            "config": dict(config),
        }
        doc = self._call("train", body, TrainingFailedError)
        weights = doc.get("weights")
        return TrainResult(
            model_ref=doc["model_ref"],
            epoch_scores=[float(s) for s in doc["epoch_scores"]],
            weights=_unb64(weights) if weights else None,
        )

    def predict_classes(self, model_ref, images):
        body = {
            "model_ref": model_ref,
            "task": "classification",
            "images": [_b64(encode_png(i)) for i in images],
        }
        doc = self._call("predict", body, TrainingFailedError)
        return [(p["class_id"], float(p["confidence"])) for p in doc["predictions"]]

    def predict_detections(self, model_ref, images):
        body = {
            "model_ref": model_ref,
            "task": "detection",
            "images": [_b64(encode_png(i)) for i in images],
        }
        doc = self._call("predict", body, TrainingFailedError)
        out = []
        for per_image in doc["predictions"]:
            out.append(
                [
                    Detection(
                        BBox(d["x"], d["y"], d["w"], d["h"]),
                        int(d["class_id"]),
                        float(d["confidence"]),
                    )
                    for d in per_image
                ]
            )
        return out


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


def get_backend(spec: str) -> Backend:
    """Resolve a backend from a CLI/config spec: ``mock`` or a base URL."""
    if spec == "mock":
        from .mock_backend import MockBackend

        return MockBackend()
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpBackend(spec)
    raise BackendUnavailableError(f"unknown backend spec {spec!r} (use 'mock' or an http URL)")

"""Backend protocol conformance checks.

Executable form of the ``/v1/backend/*`` contract: schema shapes,
determinism honored as declared by the capability flags, structured error
envelopes, alpha-mask presence, and train/predict round-trips.  The checks
talk plain HTTP, so they run identically against the in-process mock and
any external adapter implementing the protocol.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass

import numpy as np

from . import wire
from .dataset import Provenance, SyntheticDataset, SyntheticSample
from .imaging import decode_png, encode_png
from .sanitizer import TaskKind, UserRequest

REQUIRED_ENDPOINTS = {
    "fine_tune",
    "generate",
    "condition_generate",
    "inpaint",
    "embed",
    "segment",
    "train",
    "predict",
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


class _Session:
    """Tiny wrapper so both httpx clients and FastAPI test clients work."""

    def __init__(self, client):
        self.client = client

    def get(self, path):
        return self.client.get(path)

    def post(self, path, payload):
        payload = dict(payload, request_id=str(uuid.uuid4()))
        return self.client.post(path, json=payload), payload["request_id"]


def _b64_image(img: np.ndarray) -> str:
    return wire.b64encode_bytes(encode_png(img))


def _image_from(doc_field: str) -> np.ndarray:
    return decode_png(wire.b64decode_str(doc_field))


def _reference_images(seed: int = 0, size: int = 24) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(2):
        base = rng.integers(40, 200, size=3)
        img = np.clip(
            base + rng.normal(0, 12, size=(size, size, 3)), 0, 255
        ).astype(np.uint8)
        images.append(img)
    return images


def _tiny_classification_dataset() -> tuple[SyntheticDataset, SyntheticDataset]:
    request = UserRequest(
        ("widget",), "bench", "tell bright from dark", ("bright", "dark"),
        TaskKind.CLASSIFICATION,
    )
    rng = np.random.default_rng(7)
    samples = []
    for label, base in (("bright", 200), ("dark", 40)):
        for k in range(4):
            img = np.clip(
                base + rng.normal(0, 10, size=(24, 24, 3)), 0, 255
            ).astype(np.uint8)
            samples.append(
                SyntheticSample(img, label, Provenance(f"a widget is {label}", "", "", k))
            )
    train = SyntheticDataset(request, samples[:3] + samples[4:7], 7)
    val = SyntheticDataset(request, [samples[3], samples[7]], 7)
    return train, val


def run_conformance(client) -> list[CheckResult]:
    """Run every protocol check; returns one result per check."""
    session = _Session(client)
    results: list[CheckResult] = []

    def check(name: str, fn) -> None:
        try:
            detail = fn() or ""
            results.append(CheckResult(name, True, detail))
        except AssertionError as exc:
            results.append(CheckResult(name, False, str(exc)))
        except Exception as exc:
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))

    capabilities: dict = {}

    def check_capabilities():
        resp = session.get("/v1/backend/capabilities")
        assert resp.status_code == 200, f"status {resp.status_code}"
        doc = resp.json()
        assert isinstance(doc.get("provider"), str) and doc["provider"], "provider missing"
        assert isinstance(doc.get("deterministic"), bool), "deterministic flag missing"
        missing = REQUIRED_ENDPOINTS - set(doc.get("endpoints", ()))
        assert not missing, f"endpoints missing: {sorted(missing)}"
        capabilities.update(doc)
        return doc["provider"]

    check("capabilities", check_capabilities)

    def check_generate_alpha():
        resp, rid = session.post(
            "/v1/backend/generate",
            {"model_ref": "pretrained", "prompt": "a widget", "seed": 3, "want_alpha": True},
        )
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        doc = resp.json()
        assert doc.get("request_id") == rid, "request_id not echoed"
        image = _image_from(doc["image"])
        assert doc.get("alpha"), "alpha mask missing for want_alpha=true"
        alpha = _image_from(doc["alpha"])
        assert alpha.shape[:2] == image.shape[:2], "alpha dims differ from image"
        return f"{image.shape[1]}x{image.shape[0]}"

    check("generate returns image and alpha", check_generate_alpha)

    def check_generate_determinism():
        if not capabilities.get("deterministic", False):
            return "skipped: backend declares nondeterminism"
        body = {"model_ref": "pretrained", "prompt": "a widget", "seed": 11, "want_alpha": True}
        first, _ = session.post("/v1/backend/generate", body)
        second, _ = session.post("/v1/backend/generate", body)
        a, b = first.json(), second.json()
        assert a["image"] == b["image"], "image bytes differ across identical calls"
        assert a["alpha"] == b["alpha"], "alpha bytes differ across identical calls"

    check("generate determinism per capability flag", check_generate_determinism)

    model_ref_box: list[str] = []

    def check_fine_tune():
        refs = _reference_images()
        resp, _ = session.post(
            "/v1/backend/fine_tune",
            {"role": "t", "references": [_b64_image(r) for r in refs], "config": {}},
        )
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        ref = resp.json()["model_ref"]
        assert isinstance(ref, str) and ref, "empty model_ref"
        model_ref_box.append(ref)
        resp2, _ = session.post(
            "/v1/backend/generate",
            {"model_ref": ref, "prompt": "a widget", "seed": 1, "want_alpha": False},
        )
        assert resp2.status_code == 200, "fine-tuned model_ref rejected by generate"
        _image_from(resp2.json()["image"])
        return ref

    check("fine_tune then generate round-trip", check_fine_tune)

    def check_condition_generate():
        feature = np.zeros((24, 24), dtype=np.uint8)
        feature[6:18, 6] = 255
        feature[6, 6:18] = 255
        resp, _ = session.post(
            "/v1/backend/condition_generate",
            {"features": [_b64_image(feature)], "prompt": "a widget", "seed": 2, "count": 3},
        )
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        images = resp.json()["images"]
        assert len(images) == 3, f"expected 3 conditioned images, got {len(images)}"
        shapes = {(i.shape[0], i.shape[1]) for i in map(_image_from, images)}
        assert shapes == {(24, 24)}, f"conditioned image dims {shapes}"

    check("condition_generate honors count and dims", check_condition_generate)

    def check_inpaint():
        canvas = np.full((24, 24, 3), 60, dtype=np.uint8)
        mask = np.zeros((24, 24), dtype=np.uint8)
        mask[:, 12:] = 255
        resp, _ = session.post(
            "/v1/backend/inpaint",
            {
                "model_ref": "pretrained",
                "canvas": _b64_image(canvas),
                "mask": _b64_image(mask),
                "prompt": "a bench",
                "seed": 5,
            },
        )
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        out = _image_from(resp.json()["image"])
        assert out.shape[:2] == (24, 24), f"inpaint changed dims to {out.shape[:2]}"

    check("inpaint preserves canvas dims", check_inpaint)

    def check_embed():
        imgs = _reference_images(seed=5)
        resp, _ = session.post("/v1/backend/embed", {"images": [_b64_image(i) for i in imgs]})
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        vectors = resp.json()["vectors"]
        assert len(vectors) == 2, "one vector per image required"
        providers = {v["provider_id"] for v in vectors}
        dims = {v["dimension"] for v in vectors}
        assert len(providers) == 1 and len(dims) == 1, "inconsistent provider or dimension"
        for v in vectors:
            assert len(v["values"]) == v["dimension"], "dimension mismatch with values"
        t1, _ = session.post("/v1/backend/embed", {"texts": [""]})
        t2, _ = session.post("/v1/backend/embed", {"texts": [""]})
        assert t1.status_code == 200, "text embedding failed"
        assert t1.json()["vectors"] == t2.json()["vectors"], "empty-prompt embedding not stable"
        assert t1.json()["vectors"][0]["provider_id"] in providers, (
            "text and image embeddings live in different provider spaces"
        )

    check("embed images and stable empty-prompt baseline", check_embed)

    def check_segment():
        rng = np.random.default_rng(9)
        image = rng.integers(0, 255, size=(32, 32, 3), dtype=np.uint8)
        resp, _ = session.post(
            "/v1/backend/segment", {"image": _b64_image(image), "targets": ["widget", "gadget"]}
        )
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        doc = resp.json()
        assert len(doc["masks"]) == 2 and len(doc["confidences"]) == 2, "one mask per target"
        for mask_b64, conf in zip(doc["masks"], doc["confidences"]):
            mask = _image_from(mask_b64)
            assert mask.shape[:2] == (32, 32), "mask dims differ from image"
            assert 0.0 <= conf <= 1.0, f"confidence {conf} outside [0, 1]"

    check("segment returns per-target masks", check_segment)

    def check_train_predict():
        train, val = _tiny_classification_dataset()
        payload = wire.b64encode_bytes(wire.dataset_splits_to_zip_bytes(train, val))
        resp, _ = session.post(
            "/v1/backend/train", {"dataset": payload, "config": {"epochs": 2}}
        )
        assert resp.status_code == 200, f"status {resp.status_code}: {resp.text[:200]}"
        doc = resp.json()
        assert isinstance(doc["model_ref"], str) and doc["model_ref"], "empty model_ref"
        scores = doc["epoch_scores"]
        assert isinstance(scores, list) and len(scores) == 2, "one validation score per epoch"
        assert all(0.0 <= float(s) <= 1.0 for s in scores), "scores outside [0, 1]"
        images = [s.image for s in val.samples]
        presp, _ = session.post(
            "/v1/backend/predict",
            {
                "model_ref": doc["model_ref"],
                "task": "classification",
                "images": [_b64_image(i) for i in images],
            },
        )
        assert presp.status_code == 200, f"predict status {presp.status_code}"
        predictions = presp.json()["predictions"]
        assert len(predictions) == len(images), "one prediction per image"
        for p in predictions:
            assert isinstance(p["class_id"], str), "class_id must be a class name"
            assert 0.0 <= p["confidence"] <= 1.0, "confidence outside [0, 1]"

    check("train and predict round-trip", check_train_predict)

    def check_error_envelope():
        resp, _ = session.post(
            "/v1/backend/generate",
            {"model_ref": "no-such-model", "prompt": "x", "seed": 0, "want_alpha": False},
        )
        assert resp.status_code >= 400, "unknown model_ref must fail"
        err = resp.json().get("error", {})
        assert err.get("code"), "error envelope missing code"
        assert err.get("message"), "error envelope missing message"
        assert isinstance(err.get("retryable"), bool), "error envelope missing retryable flag"

    check("structured error envelope", check_error_envelope)

    return results


def assert_conformance(client) -> list[CheckResult]:
    results = run_conformance(client)
    failures = [r for r in results if not r.passed]
    if failures:
        lines = "; ".join(f"{r.name}: {r.detail}" for r in failures)
        raise AssertionError(f"{len(failures)} conformance check(s) failed: {lines}")
    return results

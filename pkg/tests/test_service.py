import hashlib
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from sanigen import wire
from sanigen.errors import InvalidArgumentError, NotFoundError
from sanigen.sanitizer import build_bundle
from sanigen.service import ServiceConfig, create_app
from sanigen.store import ServerStore
from tests.conftest import make_corpus, preference


def make_bundle_body(request, pref_spec=("L0", "L0"), seed=1, n=3, size=48):
    images, manifest = make_corpus(n=n, size=size, seed=2)
    bundle = build_bundle(request, images, manifest, preference(*pref_spec), seed=seed)
    return wire.dump_bundle(bundle)


def wait_for(client, job_id, timeout=60.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        doc = client.get(f"/v1/jobs/{job_id}").json()
        if doc["state"] in ("done", "failed"):
            return doc
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} still {doc['state']}")


@pytest.fixture
def app(tmp_path):
    return create_app(ServiceConfig(data_dir=str(tmp_path / "data"), samples_per_class=3))


class TestJobLifecycle:
    def test_submit_runs_to_done_with_artifacts(self, app, husky_request):
        body = make_bundle_body(husky_request)
        with TestClient(app) as client:
            created = client.post("/v1/jobs", content=body)
            assert created.status_code == 201
            doc = created.json()
            assert doc["state"] == "queued"
            final = wait_for(client, doc["id"])
            assert final["state"] == "done"
            kinds = {a["kind"] for a in final["artifacts"]}
            assert {"dataset", "utility_report", "model_weights"} <= kinds

    def test_artifact_fetch_and_content_address(self, app, husky_request):
        body = make_bundle_body(husky_request)
        with TestClient(app) as client:
            job = client.post("/v1/jobs", content=body).json()
            final = wait_for(client, job["id"])
            ref = final["artifacts"][0]
            resp = client.get(f"/v1/artifacts/{ref['address']}")
            assert resp.status_code == 200
            assert hashlib.sha256(resp.content).hexdigest() == ref["address"]

    def test_idempotent_resubmission(self, app, husky_request):
        body = make_bundle_body(husky_request)
        with TestClient(app) as client:
            first = client.post("/v1/jobs", content=body, headers={"Idempotency-Key": "same"})
            second = client.post("/v1/jobs", content=body, headers={"Idempotency-Key": "same"})
            assert first.status_code == 201 and second.status_code == 200
            assert first.json()["id"] == second.json()["id"]

    def test_conflicting_idempotency_key(self, app, husky_request):
        with TestClient(app) as client:
            client.post(
                "/v1/jobs",
                content=make_bundle_body(husky_request, seed=1),
                headers={"Idempotency-Key": "k"},
            )
            other = client.post(
                "/v1/jobs",
                content=make_bundle_body(husky_request, seed=2),
                headers={"Idempotency-Key": "k"},
            )
            assert other.status_code == 409

    def test_schema_violation_names_field(self, app, husky_request):
        body = json.loads(make_bundle_body(husky_request))
        body["images"][0]["segments"][0]["payload"] = "!!!"
        with TestClient(app) as client:
            resp = client.post("/v1/jobs", content=json.dumps(body))
            assert resp.status_code == 422
            assert "images.0.segments.0" in resp.json()["error"]["field"]

    def test_oversized_payload_rejected(self, tmp_path, husky_request):
        app = create_app(
            ServiceConfig(data_dir=str(tmp_path / "small"), max_bundle_bytes=1000)
        )
        with TestClient(app) as client:
            resp = client.post("/v1/jobs", content=make_bundle_body(husky_request))
            assert resp.status_code == 413

    def test_unknown_job_404(self, app):
        with TestClient(app) as client:
            resp = client.get("/v1/jobs/doesnotexist")
            assert resp.status_code == 404
            assert resp.json()["error"]["code"] == "not-found"

    def test_failing_pipeline_marks_job_failed(self, tmp_path, husky_request):
        # one sample per class cannot satisfy the train/validation split
        app = create_app(
            ServiceConfig(data_dir=str(tmp_path / "data"), samples_per_class=1)
        )
        with TestClient(app) as client:
            job = client.post("/v1/jobs", content=make_bundle_body(husky_request)).json()
            final = wait_for(client, job["id"])
            assert final["state"] == "failed"
            assert final["error"]


class TestStore:
    def test_states_monotone(self, tmp_path):
        store = ServerStore(tmp_path / "s")
        store.create_job("j1", "{}", None)
        store.transition("j1", "generating")
        with pytest.raises(InvalidArgumentError):
            store.transition("j1", "queued")
        store.transition("j1", "failed", error="boom")
        job = store.get_job("j1")
        assert job.state == "failed" and job.error == "boom"

    def test_done_cannot_fail(self, tmp_path):
        store = ServerStore(tmp_path / "s")
        store.create_job("j1", "{}", None)
        store.transition("j1", "done")
        with pytest.raises(InvalidArgumentError):
            store.transition("j1", "failed", error="late")

    def test_unknown_job(self, tmp_path):
        store = ServerStore(tmp_path / "s")
        with pytest.raises(NotFoundError):
            store.get_job("missing")

    def test_pending_jobs_resume_on_restart(self, tmp_path, husky_request):
        root = tmp_path / "s"
        store = ServerStore(root)
        store.create_job("j1", make_bundle_body(husky_request), None)
        store.transition("j1", "generating")
        store.close()
        reopened = ServerStore(root)
        assert reopened.pending_job_ids() == ["j1"]

    def test_artifact_round_trip(self, tmp_path):
        store = ServerStore(tmp_path / "s")
        ref = store.put_artifact("dataset", "application/zip", b"payload-bytes")
        data, media_type, kind = store.get_artifact(ref.address)
        assert data == b"payload-bytes" and media_type == "application/zip"
        assert kind == "dataset"
        assert ref.address == hashlib.sha256(b"payload-bytes").hexdigest()


class TestConfig:
    def test_file_and_env_overrides(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"port": 9999, "backend": "mock"}))
        cfg = ServiceConfig.load(
            config_path, env={"SANIGEN_PORT": "1234", "SANIGEN_SEED": "7"}
        )
        assert cfg.port == 1234  # env wins
        assert cfg.seed == 7
        assert cfg.backend == "mock"

    def test_unknown_key_rejected(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"no_such_option": 1}))
        with pytest.raises(InvalidArgumentError):
            ServiceConfig.load(config_path, env={})


class TestBackendRoutes:
    def test_embed_requires_exactly_one_input_kind(self, app):
        with TestClient(app) as client:
            resp = client.post("/v1/backend/embed", json={"images": ["aa=="], "texts": ["x"]})
            assert resp.status_code == 422

    def test_train_rejects_bad_dataset(self, app):
        with TestClient(app) as client:
            resp = client.post("/v1/backend/train", json={"dataset": "aGk=", "config": {}})
            assert resp.status_code == 422

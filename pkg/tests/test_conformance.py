import pytest
from fastapi.testclient import TestClient

from sanigen.conformance import assert_conformance, run_conformance
from sanigen.service import ServiceConfig, create_app


@pytest.fixture
def client(tmp_path):
    app = create_app(ServiceConfig(data_dir=str(tmp_path / "data")))
    with TestClient(app) as c:
        yield c


def test_mock_backend_passes_every_check(client):
    results = assert_conformance(client)
    assert len(results) >= 10


def test_checks_report_names_and_pass_state(client):
    results = run_conformance(client)
    names = {r.name for r in results}
    assert "generate returns image and alpha" in names
    assert "structured error envelope" in names
    assert all(r.passed for r in results)

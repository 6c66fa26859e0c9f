"""The adapter must pass the identical protocol conformance suite the
reference mock backend passes (schema shapes, determinism flags, error
envelopes, alpha masks, train/predict round-trips)."""

import pytest
from fastapi.testclient import TestClient

conformance = pytest.importorskip(
    "sanigen.conformance", reason="protocol conformance suite not installed"
)

from modelhost.config import AdapterConfig
from modelhost.service import create_app


@pytest.fixture(scope="module")
def client():
    app = create_app(AdapterConfig())
    with TestClient(app, raise_server_exceptions=False) as c:
        yield c


def test_adapter_passes_protocol_conformance(client):
    results = conformance.assert_conformance(client)
    for result in results:
        print(f"CONFORMANCE PASS: {result.name}")
    assert len(results) >= 10

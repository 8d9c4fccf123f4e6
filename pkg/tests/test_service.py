from __future__ import annotations

import numpy as np
import pytest
from fastapi.testclient import TestClient

from mpctensor import nn
from mpctensor.bench import prepare_model
from mpctensor.schemas import PredictRequest
from mpctensor.service import create_app


@pytest.fixture
def client():
    return TestClient(create_app())


def test_health(client):
    assert client.get("/health").json()["status"] == "ok"


def test_predict_synthetic_matches_float(client):
    r = client.post("/predict", json={"network": "logreg", "synthetic": 4, "seed": 3})
    assert r.status_code == 200
    body = r.json()
    assert len(body["logits"]) == 4 and len(body["predictions"]) == 4
    assert np.allclose(np.sum(body["probs"], axis=1), 1.0)
    assert {s["sender"] for s in body["stats"] if s["phase"] == "online"}.isdisjoint({"server2"})


def test_predict_with_uploaded_weights(client):
    model = nn.build_network("logreg")
    rng = np.random.default_rng(0)
    weights = {"fc/w": rng.normal(0, 0.05, (784, 10)), "fc/b": rng.normal(0, 0.1, 10)}
    up = client.put("/models/logreg/weights", json={"tensors": {k: v.tolist() for k, v in weights.items()}})
    assert up.status_code == 200 and up.json()["registered"]
    x = rng.uniform(0, 1, (2, 784))
    body = client.post("/predict", json={"network": "logreg", "images": x.tolist(), "seed": 1}).json()
    model.weights = weights
    assert np.max(np.abs(np.array(body["logits"]) - nn.plaintext_eval(model, x))) < 0.01


def test_predict_over_loopback_tcp(client):
    a = client.post("/predict", json={"synthetic": 2, "seed": 5}).json()
    b = client.post("/predict", json={"synthetic": 2, "seed": 5, "transport": "tcp"}).json()
    assert a["logits"] == b["logits"] and a["stats"] == b["stats"]


def test_bad_requests_are_422(client):
    assert client.post("/predict", json={"synthetic": 0}).status_code == 422
    assert client.post("/predict", json={"synthetic": 1, "backend": "int100", "trunc": "local"}).status_code == 422
    assert client.post("/predict", json={"images": [[0.0] * 5]}).status_code == 422
    bad = {"tensors": {"fc/w": [[0.0]], "fc/b": [0.0]}}
    assert client.put("/models/logreg/weights", json=bad).status_code == 422
    assert client.get("/models/Z").status_code == 422
    assert client.get("/poly", params={"degree": 1}).status_code == 422


def test_plan_stats_and_model_info(client):
    body = client.post("/plan/stats", json={"network": "A", "batch": 2}).json()
    assert body["ops"]["truncate"] > 0 and body["nodes"] > 0
    info = client.get("/models/A").json()
    assert info["parameters"] == nn.build_network("A").parameter_count() and not info["registered"]


def test_poly_endpoint(client):
    body = client.get("/poly", params={"degree": 4}).json()
    assert body["coeffs"] == pytest.approx(list(nn.poly_relu_fit(4).coeffs))


def test_bench_endpoint(client):
    body = client.post("/bench", json={"network": "logreg", "batch_sizes": [1], "runs": 1,
                                       "eval_samples": 10, "seed": 2}).json()
    assert body["timings"][0]["batch"] == 1 and body["quality"][0]["samples"] == 10
    assert body["text"].startswith("Runtime")


def test_schema_round_trip():
    req = PredictRequest(synthetic=3, seed=None)
    assert PredictRequest.model_validate_json(req.model_dump_json()) == req
    assert prepare_model("logreg").name == "logreg"

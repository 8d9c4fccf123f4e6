"""HTTP front end over the core package.

Every request runs a complete session inside the service process, with all
parties as in-process workers (or over loopback TCP when asked). Networked
deployments where each party is its own process use ``mpctensor party``
instead; the service does not coordinate remote parties.
"""
from __future__ import annotations

import threading
import time
from collections import Counter

import numpy as np
from fastapi import FastAPI, HTTPException

from . import bench as benchmod
from . import nn
from .data import accuracy, synthetic_digits
from .errors import MpcError
from .runtime import run_inmemory, run_tcp_local
from .schemas import (BenchRequest, BenchResponse, LinkRow, ModelInfo, PlanStatsRequest, PlanStatsResponse,
                      PolyResponse, PredictRequest, PredictResponse, QualityOut, TimingOut, WeightsUpload)


class ModelRegistry:
    """Weights uploaded by the model owner, one set per network."""

    def __init__(self):
        self._weights: dict[str, dict[str, np.ndarray]] = {}
        self._lock = threading.Lock()

    def put(self, network: str, weights: dict[str, np.ndarray]) -> nn.ModelSpec:
        model = nn.build_network(network)
        model.weights = weights
        model.check_weights()
        with self._lock:
            self._weights[model.name] = weights
        return model

    def get(self, network: str) -> dict[str, np.ndarray] | None:
        with self._lock:
            return self._weights.get(nn.build_network(network).name)

    def model(self, network: str, weights_seed: int = 0) -> nn.ModelSpec:
        return benchmod.prepare_model(network, weights_seed, self.get(network))


def _rows(stats) -> list[LinkRow]:
    return [LinkRow(**{k: r[k] for k in LinkRow.model_fields}) for r in stats.rows()]


def predict(req: PredictRequest, registry: ModelRegistry) -> PredictResponse:
    model = registry.model(req.network, req.weights_seed)
    if req.images is not None:
        x = np.asarray(req.images, dtype=np.float64)
        labels = req.labels
    else:
        x, labels = synthetic_digits(req.synthetic, req.weights_seed + 1)
        labels = labels.tolist() if req.labels is None else req.labels
    x = x.reshape(len(x), *model.input_shape)
    plan = nn.build_inference_plan(model, len(x), req.backend, trunc_mode=req.trunc)
    runner = run_inmemory if req.transport == "inmemory" else run_tcp_local
    res = runner(plan, nn.plan_inputs(model, x), seed=req.seed)
    out = res.outputs[nn.CLIENT]
    logits = out["logits"]
    return PredictResponse(
        network=model.name, backend=req.backend, trunc=req.trunc, logits=logits.tolist(),
        probs=out["probs"].tolist(), predictions=np.argmax(logits, axis=-1).tolist(),
        accuracy=None if labels is None else accuracy(logits, labels), seconds=res.seconds,
        plan_nodes=len(plan), stats=_rows(res.stats))


def run_bench(req: BenchRequest, registry: ModelRegistry) -> BenchResponse:
    report = benchmod.bench(req.network, req.backends, req.batch_sizes, req.runs, req.trunc,
                            req.seed or 0, registry.get(req.network), eval_samples=req.eval_samples)
    return BenchResponse(trunc_mode=report.trunc_mode,
                         timings=[TimingOut(**t) for t in report.as_dict()["timings"]],
                         quality=[QualityOut(**q) for q in report.as_dict()["quality"]],
                         text=report.text(), csv=report.csv())


def plan_stats(req: PlanStatsRequest) -> PlanStatsResponse:
    plan = nn.build_inference_plan(nn.build_network(req.network), req.batch, req.backend, trunc_mode=req.trunc)
    return PlanStatsResponse(plan_id=f"{plan.plan_id:016x}", nodes=len(plan),
                             ops=dict(Counter(n.op for n in plan.nodes)),
                             stats=_rows(benchmod.predicted_stats(plan)))


def create_app(registry: ModelRegistry | None = None) -> FastAPI:
    registry = registry or ModelRegistry()
    app = FastAPI(title="mpctensor", version="0.1.0")
    app.state.registry = registry
    started = time.time()

    def guarded(fn, *args):
        try:
            return fn(*args)
        except (MpcError, ValueError, KeyError) as exc:
            raise HTTPException(status_code=422, detail=f"{type(exc).__name__}: {exc}") from None

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "uptime_s": round(time.time() - started, 3)}

    @app.post("/predict", response_model=PredictResponse)
    def predict_route(req: PredictRequest) -> PredictResponse:
        return guarded(predict, req, registry)

    @app.post("/bench", response_model=BenchResponse)
    def bench_route(req: BenchRequest) -> BenchResponse:
        return guarded(run_bench, req, registry)

    @app.post("/plan/stats", response_model=PlanStatsResponse)
    def plan_stats_route(req: PlanStatsRequest) -> PlanStatsResponse:
        return guarded(plan_stats, req)

    @app.get("/poly", response_model=PolyResponse)
    def poly_route(degree: int = 4, lo: float = -3.0, hi: float = 3.0) -> PolyResponse:
        fit = guarded(nn.poly_relu_fit, degree, (lo, hi))
        return PolyResponse(degree=degree, interval=fit.interval, coeffs=list(fit.coeffs), max_error=fit.max_error)

    @app.get("/models/{network}", response_model=ModelInfo)
    def model_info(network: str) -> ModelInfo:
        model = guarded(nn.build_network, network)
        return ModelInfo(network=model.name, parameters=model.parameter_count(),
                         registered=registry.get(network) is not None, manifest=model.to_manifest())

    @app.put("/models/{network}/weights", response_model=ModelInfo)
    def upload(network: str, body: WeightsUpload) -> ModelInfo:
        weights = {k: np.asarray(v, dtype=np.float64) for k, v in body.tensors.items()}
        model = guarded(registry.put, network, weights)
        return ModelInfo(network=model.name, parameters=model.parameter_count(), registered=True,
                         manifest=model.to_manifest())

    return app

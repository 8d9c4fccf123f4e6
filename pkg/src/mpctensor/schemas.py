"""Request and response models shared by the HTTP service and its CLI client."""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

NetworkName = Literal["A", "B", "C", "logreg"]
BackendName = Literal["int64", "int100"]
TruncName = Literal["interactive", "local"]


class LinkRow(BaseModel):
    phase: str
    sender: str
    receiver: str
    messages: int
    payload_bytes: int
    frame_bytes: int


class SessionOptions(BaseModel):
    network: NetworkName = "logreg"
    backend: BackendName = "int64"
    trunc: TruncName = "interactive"
    seed: Optional[int] = Field(None, description="session seed; omit for OS entropy")
    weights_seed: int = Field(0, description="seed for random weights when none are registered")

    @model_validator(mode="after")
    def _local_needs_int64(self):
        if self.trunc == "local" and self.backend != "int64":
            raise ValueError("local truncation requires backend int64")
        return self


class PredictRequest(SessionOptions):
    images: Optional[list] = Field(None, description="batch of images, nested lists of floats in [0, 1]")
    synthetic: int = Field(0, ge=0, description="use this many synthetic digits when images is omitted")
    labels: Optional[list[int]] = None
    transport: Literal["inmemory", "tcp"] = "inmemory"

    @model_validator(mode="after")
    def _has_inputs(self):
        if self.images is None and self.synthetic == 0:
            raise ValueError("give images or a positive synthetic count")
        return self


class PredictResponse(BaseModel):
    network: str
    backend: str
    trunc: str
    logits: list[list[float]]
    probs: list[list[float]]
    predictions: list[int]
    accuracy: Optional[float] = None
    seconds: float
    plan_nodes: int
    stats: list[LinkRow]


class BenchRequest(SessionOptions):
    backends: list[BackendName] = ["int64"]
    batch_sizes: list[int] = [1, 10, 100]
    runs: int = Field(10, ge=1)
    eval_samples: int = Field(0, ge=0)


class TimingOut(BaseModel):
    network: str
    backend: str
    batch: int
    runs: int
    mean_ms: float
    std_ms: float
    per_sample_ms: float
    per_sample_std_ms: float


class QualityOut(BaseModel):
    network: str
    backend: str
    samples: int
    accuracy: Optional[float]
    float_accuracy: Optional[float]
    agreement: float
    kl_mean: float


class BenchResponse(BaseModel):
    trunc_mode: str
    timings: list[TimingOut]
    quality: list[QualityOut]
    text: str
    csv: str


class PlanStatsRequest(BaseModel):
    network: NetworkName = "logreg"
    backend: BackendName = "int64"
    trunc: TruncName = "interactive"
    batch: int = Field(1, ge=1)


class PlanStatsResponse(BaseModel):
    plan_id: str
    nodes: int
    ops: dict[str, int]
    stats: list[LinkRow]


class PolyResponse(BaseModel):
    degree: int
    interval: tuple[float, float]
    coeffs: list[float]
    max_error: float


class WeightsUpload(BaseModel):
    tensors: dict[str, list] = Field(description="weight name to nested list of floats")


class ModelInfo(BaseModel):
    network: str
    parameters: int
    registered: bool
    manifest: str

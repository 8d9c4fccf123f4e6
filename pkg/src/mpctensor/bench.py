"""Benchmark harness: timing, accuracy, KL divergence and traffic reports."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .data import synthetic_digits
from .plan import SERVER2, ComputationPlan, offline_messages, online_messages
from .protocol import TruncMode
from .ring import Backend, FixedPointConfig
from .runtime import ChannelStats, run_inmemory, run_tcp_local
from .runtime.session import softmax
from .runtime.wire import frame_size, payload_size

KL_SMOOTHING = 1e-9
KL_HEADER = "KL(P_float || P_secure), smoothed by 1e-9, mean over samples"


def kl_divergence(p: np.ndarray, q: np.ndarray, smoothing: float = KL_SMOOTHING) -> float:
    """Mean over rows of KL(p || q) for row-stochastic arrays.

    Both distributions get ``smoothing`` added to every entry and are
    renormalized, so zero probabilities never produce ``log(0)``.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64)) + smoothing
    q = np.atleast_2d(np.asarray(q, dtype=np.float64)) + smoothing
    p /= p.sum(axis=-1, keepdims=True)
    q /= q.sum(axis=-1, keepdims=True)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=-1)))


# -- traffic ------------------------------------------------------------------

def predicted_stats(plan: ComputationPlan) -> ChannelStats:
    """Traffic the plan must produce, derived from its nodes alone."""
    stats = ChannelStats()
    for _node, _tag, recipient, shape in offline_messages(plan):
        stats.record(SERVER2, recipient, 0, payload_size(shape, plan.backend, plan.crt),
                     frame_size(shape, plan.backend, plan.crt))
    for _node, _tag, sender, recipient, shape in online_messages(plan):
        stats.record(sender, recipient, 1, payload_size(shape, plan.backend, plan.crt),
                     frame_size(shape, plan.backend, plan.crt))
    return stats


def stats_report(stats: ChannelStats, fmt: str = "text") -> str:
    rows = stats.rows()
    fields = ["phase", "sender", "receiver", "messages", "payload_bytes", "frame_bytes"]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fields, lineterminator="\n")
        w.writeheader()
        w.writerows({k: r[k] for k in fields} for r in rows)
        return buf.getvalue()
    lines = [f"{'phase':<8} {'sender':<10} {'receiver':<10} {'messages':>9} {'payload_bytes':>14} {'frame_bytes':>14}"]
    for r in rows:
        lines.append(f"{r['phase']:<8} {r['sender']:<10} {r['receiver']:<10} {r['messages']:>9} "
                     f"{r['payload_bytes']:>14} {r['frame_bytes']:>14}")
    for phase in ("offline", "online"):
        t = stats.total(phase)
        lines.append(f"{phase:<8} {'total':<10} {'':<10} {t.messages:>9} {t.payload_bytes:>14} {t.frame_bytes:>14}")
    return "\n".join(lines) + "\n"


# -- benchmark ----------------------------------------------------------------

@dataclass
class TimingRow:
    network: str
    backend: str
    batch: int
    runs: int
    mean_ms: float
    std_ms: float

    @property
    def per_sample_ms(self) -> float:
        return self.mean_ms / self.batch

    @property
    def per_sample_std_ms(self) -> float:
        """Stddev of the per-inference time (batch time / batch) across runs."""
        return self.std_ms / self.batch


@dataclass
class QualityRow:
    network: str
    backend: str
    samples: int
    accuracy: float | None  # vs labels, None without labels
    float_accuracy: float | None
    agreement: float  # secure argmax == float argmax
    kl_mean: float


@dataclass
class BenchReport:
    timings: list[TimingRow] = field(default_factory=list)
    quality: list[QualityRow] = field(default_factory=list)
    trunc_mode: str = TruncMode.INTERACTIVE.value

    def text(self) -> str:
        out = ["Runtime: wall-clock ms per secure evaluation of one batch (mean_ms, std_ms over runs);",
               "per-inference figures divide by the batch size (ms/sample, std/sample)",
               f"Truncation: {self.trunc_mode}", "",
               f"{'network':<8} {'backend':<7} {'batch':>6} {'runs':>5} {'mean_ms':>10} {'std_ms':>9} "
               f"{'ms/sample':>10} {'std/sample':>10}"]
        for t in self.timings:
            out.append(f"{t.network:<8} {t.backend:<7} {t.batch:>6} {t.runs:>5} {t.mean_ms:>10.2f} "
                       f"{t.std_ms:>9.2f} {t.per_sample_ms:>10.3f} {t.per_sample_std_ms:>10.3f}")
        if self.quality:
            out += ["", KL_HEADER, f"{'network':<8} {'backend':<7} {'samples':>8} {'acc_%':>7} {'float_%':>8} "
                                   f"{'agree_%':>8} {'kl_mean':>11}"]
            for q in self.quality:
                acc = "-" if q.accuracy is None else f"{100 * q.accuracy:.2f}"
                facc = "-" if q.float_accuracy is None else f"{100 * q.float_accuracy:.2f}"
                out.append(f"{q.network:<8} {q.backend:<7} {q.samples:>8} {acc:>7} {facc:>8} "
                           f"{100 * q.agreement:>8.2f} {q.kl_mean:>11.3e}")
        return "\n".join(out) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "network", "backend", "batch", "runs", "mean_ms", "std_ms",
                    "per_sample_ms", "per_sample_std_ms", "samples", "accuracy", "float_accuracy", "agreement", "kl_mean"])
        for t in self.timings:
            w.writerow(["timing", t.network, t.backend, t.batch, t.runs, f"{t.mean_ms:.4f}", f"{t.std_ms:.4f}",
                        f"{t.per_sample_ms:.4f}", f"{t.per_sample_std_ms:.4f}", "", "", "", "", ""])
        for q in self.quality:
            w.writerow(["quality", q.network, q.backend, "", "", "", "", "", "", q.samples,
                        "" if q.accuracy is None else f"{q.accuracy:.6f}",
                        "" if q.float_accuracy is None else f"{q.float_accuracy:.6f}",
                        f"{q.agreement:.6f}", f"{q.kl_mean:.6e}"])
        return buf.getvalue()

    def as_dict(self) -> dict:
        timings = [asdict(t) | {"per_sample_ms": t.per_sample_ms, "per_sample_std_ms": t.per_sample_std_ms}
                   for t in self.timings]
        return {"trunc_mode": self.trunc_mode, "timings": timings,
                "quality": [asdict(q) for q in self.quality]}


def prepare_model(network: str, seed: int = 0, weights: dict | None = None,
                  calibration: np.ndarray | None = None) -> nn.ModelSpec:
    model = nn.build_network(network)
    if weights is None:
        if calibration is None:
            calibration = synthetic_digits(64, seed + 101)[0].reshape(64, *model.input_shape)
        weights = nn.random_weights(model, seed, calibration)
    model.weights = dict(weights)
    model.check_weights()
    return model


def secure_logits(model: nn.ModelSpec, x: np.ndarray, backend: Backend | str, trunc: TruncMode | str,
                  chunk: int = 100, seed=None, transport: str = "inmemory",
                  fixed: FixedPointConfig | None = None) -> np.ndarray:
    """Secure logits for ``x`` in fixed-size batches; the last batch is padded."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), *model.input_shape)
    chunk = min(chunk, len(x))
    plan = nn.build_inference_plan(model, chunk, backend, fixed, trunc)
    runner = run_inmemory if transport == "inmemory" else run_tcp_local
    out = []
    for i, start in enumerate(range(0, len(x), chunk)):
        part = x[start:start + chunk]
        padded = np.concatenate([part, np.zeros((chunk - len(part), *part.shape[1:]))]) if len(part) < chunk else part
        sid = None if seed is None else seed + i
        res = runner(plan, nn.plan_inputs(model, padded), seed=sid, session_id=i)
        out.append(res.outputs[nn.CLIENT]["logits"][:len(part)])
    return np.concatenate(out)


def bench(network: str, backends: Sequence[str] = ("int64",), batch_sizes: Sequence[int] = (1, 10, 100),
          n_runs: int = 10, trunc: TruncMode | str = TruncMode.INTERACTIVE, seed: int = 0,
          weights: dict | None = None, images: np.ndarray | None = None, labels: np.ndarray | None = None,
          eval_samples: int = 0, eval_chunk: int = 100) -> BenchReport:
    """Time secure inference per batch size and backend, then score quality.

    Quality is measured on ``images`` (or ``eval_samples`` synthetic digits)
    against the float evaluation of the same model. Seeds make every
    non-timing field reproducible.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    trunc = TruncMode.parse(trunc)
    model = prepare_model(network, seed, weights)
    report = BenchReport(trunc_mode=trunc.value)
    for backend in backends:
        backend = Backend.parse(backend)
        if trunc is TruncMode.LOCAL and backend is not Backend.INT64:
            continue
        for batch in batch_sizes:
            plan = nn.build_inference_plan(model, batch, backend, trunc_mode=trunc)
            x = synthetic_digits(batch, seed + batch)[0].reshape(batch, *model.input_shape)
            inputs = nn.plan_inputs(model, x)
            run_inmemory(plan, inputs, seed=seed)  # warm-up
            times = []
            for r in range(n_runs):
                t0 = time.perf_counter()
                run_inmemory(plan, inputs, seed=seed + r, session_id=r)
                times.append(1e3 * (time.perf_counter() - t0))
            report.timings.append(TimingRow(model.name, backend.value, batch, n_runs,
                                            float(np.mean(times)), float(np.std(times))))
        if images is None and eval_samples:
            images, labels = synthetic_digits(eval_samples, seed + 7)
        if images is not None:
            x = np.asarray(images, dtype=np.float64).reshape(len(images), *model.input_shape)
            flog = nn.plaintext_eval(model, x)
            slog = secure_logits(model, x, backend, trunc, eval_chunk, seed)
            acc = facc = None
            if labels is not None:
                acc = float(np.mean(slog.argmax(-1) == labels))
                facc = float(np.mean(flog.argmax(-1) == labels))
            report.quality.append(QualityRow(model.name, backend.value, len(x), acc, facc,
                                             float(np.mean(slog.argmax(-1) == flog.argmax(-1))),
                                             kl_divergence(softmax(flog), softmax(slog))))
    return report

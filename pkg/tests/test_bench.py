from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpctensor import nn
from mpctensor.bench import bench, kl_divergence, predicted_stats, prepare_model, secure_logits, stats_report
from mpctensor.runtime import ChannelStats


@given(st.integers(0, 2 ** 31), st.integers(1, 5), st.integers(2, 10))
@settings(max_examples=40, deadline=None)
def test_kl_self_is_zero_and_nonnegative(seed, rows, k):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(k), rows)
    q = rng.dirichlet(np.ones(k), rows)
    assert kl_divergence(p, p) == 0.0
    assert kl_divergence(p, q) >= -1e-15


def test_kl_hand_computed():
    p, q = np.array([0.5, 0.5]), np.array([0.25, 0.75])
    expect = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
    assert abs(kl_divergence(p, q, smoothing=0.0) - expect) <= 1e-12
    assert abs(kl_divergence(p, q) - expect) <= 1e-8


def test_kl_handles_zeros():
    assert np.isfinite(kl_divergence([1.0, 0.0], [0.0, 1.0]))


def test_empty_stats_report():
    text = stats_report(ChannelStats())
    assert "offline  total" in text and text.count(" 0 ") >= 2
    assert stats_report(ChannelStats(), "csv").strip() == "phase,sender,receiver,messages,payload_bytes,frame_bytes"


def test_network_a_online_message_count():
    model = nn.build_network("A")
    plan = nn.build_inference_plan(model, 1)
    stats = predicted_stats(plan)
    masks, truncs = len(plan.by_op("mask")), len(plan.by_op("truncate"))
    inputs, outputs = len(plan.by_op("input")), len(plan.by_op("output"))
    # every mask and truncation opens one value each way, inputs and outputs use two frames
    assert stats.total("online").messages == 2 * (masks + truncs + inputs + outputs)
    text = stats_report(stats)
    assert "server2" not in [line.split()[1] for line in text.splitlines()[1:] if line.startswith("online")]


def test_report_is_deterministic_apart_from_timing():
    a = bench("logreg", ["int64"], [1], n_runs=1, seed=3, eval_samples=20)
    b = bench("logreg", ["int64"], [1], n_runs=1, seed=3, eval_samples=20)
    assert a.quality == b.quality
    assert a.timings[0].batch == 1 and a.timings[0].mean_ms > 0
    assert "KL(P_float || P_secure)" in a.text()
    assert a.csv().splitlines()[0].startswith("kind,network")
    assert a.as_dict()["quality"][0]["agreement"] == a.quality[0].agreement


def test_bench_skips_local_on_int100():
    r = bench("logreg", ["int64", "int100"], [1], n_runs=1, trunc="local")
    assert [t.backend for t in r.timings] == ["int64"]


def test_bench_rejects_zero_runs():
    with pytest.raises(ValueError):
        bench("logreg", n_runs=0)


def test_secure_logits_pads_last_chunk():
    model = prepare_model("logreg", 1)
    x = np.random.default_rng(0).uniform(0, 1, (5, 784))
    got = secure_logits(model, x, "int64", "interactive", chunk=2, seed=4)
    assert got.shape == (5, 10)
    assert np.max(np.abs(got - nn.plaintext_eval(model, x))) < 0.01


def test_per_inference_stddev_is_labelled():
    r = bench("logreg", ["int64"], [2], n_runs=2, seed=1)
    t = r.timings[0]
    assert t.per_sample_std_ms == t.std_ms / 2
    assert "std/sample" in r.text() and "per_sample_std_ms" in r.csv().splitlines()[0]

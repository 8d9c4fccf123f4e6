from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpctensor.bench import predicted_stats
from mpctensor.errors import ChannelClosed, ChannelTimeout, ConfigError, ConnectFailed, ProtocolDesync
from mpctensor.plan import SERVER2, PlanBuilder
from mpctensor.ring import Backend, RingTensor
from mpctensor.runtime import (ChannelStats, InMemoryNetwork, SessionConfig, run_inmemory, run_tcp_local,
                               tcp_endpoints)
from mpctensor.runtime.session import free_ports
from mpctensor.runtime.wire import Frame, decode_frame, encode_frame, frame_size

from conftest import rand_ring

PARTIES = ("a", "b", "c")


@given(st.lists(st.integers(1, 5), min_size=0, max_size=3), st.sampled_from([Backend.INT64, Backend.CRT]),
       st.integers(0, 2 ** 32 - 1), st.integers(0, 255))
@settings(max_examples=40, deadline=None)
def test_frame_round_trip(shape, backend, node, tag):
    t = rand_ring(tuple(shape), backend, "frame", tuple(shape))
    f = Frame(7, 2 ** 63 + 5, node, tag, 1, 2, 1, t)
    data = encode_frame(f)
    assert len(data) == frame_size(t.shape, backend)
    back = decode_frame(data)
    assert back.tensor == t
    assert (back.session_id, back.plan_id, back.node_id, back.tag, back.sender, back.receiver, back.phase) == \
        (7, 2 ** 63 + 5, node, tag, 1, 2, 1)


def test_frame_length_mismatch():
    data = encode_frame(Frame(1, 1, 1, 0, 0, 1, 1, RingTensor.zeros((3,), Backend.INT64)))
    with pytest.raises(ProtocolDesync):
        decode_frame(data[:-8])
    with pytest.raises(ProtocolDesync):
        decode_frame(data + b"\0")


def _pump(eps, n=10_000):
    src, dst = eps["a"], eps["b"]
    t = RingTensor.zeros((1,), Backend.INT64)
    for i in range(n):
        src.send("b", i % 7, 0, 1, t + RingTensor.constant(i, Backend.INT64))
    got = {k: [] for k in range(7)}
    for i in range(n):
        got[i % 7].append(int(dst.recv("a", i % 7, 0).data[0]))
    for k, vals in got.items():
        assert vals == sorted(vals) and all(v % 7 == k for v in vals)


def test_inmemory_preserves_per_key_order():
    _pump(InMemoryNetwork(PARTIES).endpoints)


def test_inmemory_tag_matching_out_of_order():
    eps = InMemoryNetwork(PARTIES).endpoints
    one, two = RingTensor.constant(1, Backend.INT64), RingTensor.constant(2, Backend.INT64)
    eps["a"].send("b", 5, 1, 1, two)
    eps["a"].send("b", 5, 0, 1, one)
    assert eps["b"].recv("a", 5, 0) == one
    assert eps["b"].recv("a", 5, 1) == two


def test_inmemory_timeout_and_close():
    net = InMemoryNetwork(PARTIES, timeout=0.05)
    with pytest.raises(ChannelTimeout):
        net.endpoints["b"].recv("a", 0, 0)
    net.endpoints["a"].close()
    with pytest.raises(ChannelClosed):
        net.endpoints["b"].recv("a", 0, 0)
    with pytest.raises(ChannelClosed):
        net.endpoints["b"].send("a", 0, 0, 1, RingTensor.zeros((1,), Backend.INT64))
    with pytest.raises(ChannelClosed):
        net.endpoints["a"].send("b", 0, 0, 1, RingTensor.zeros((1,), Backend.INT64))


def test_plan_id_mismatch_is_desync():
    eps = InMemoryNetwork(PARTIES).endpoints
    eps["a"].bind(11)
    eps["b"].bind(12)
    eps["a"].send("b", 0, 0, 1, RingTensor.zeros((1,), Backend.INT64))
    with pytest.raises(ProtocolDesync):
        eps["b"].recv("a", 0, 0)


def test_stats_count_frames():
    net = InMemoryNetwork(PARTIES)
    t = RingTensor.zeros((4,), Backend.CRT)
    net.endpoints["a"].send("c", 0, 0, 0, t)
    net.endpoints["a"].send("c", 1, 0, 1, t)
    link = net.stats.links()[("a", "c", "offline")]
    assert link.messages == 1 and link.frame_bytes == frame_size((4,), Backend.CRT)
    assert link.payload_bytes == 4 * 4 * 8
    assert net.stats.total(1).messages == 1
    assert ChannelStats().total().messages == 0


def _tcp(parties=PARTIES, timeout=5.0):
    addrs = {p: f"127.0.0.1:{port}" for p, port in zip(parties, free_ports(len(parties)))}
    return tcp_endpoints(addrs, session_id=3, timeout=timeout)


def test_tcp_preserves_order_and_counts():
    eps = _tcp()
    try:
        _pump(eps)
        assert eps["b"].mailbox.received == 10_000
    finally:
        for ep in eps.values():
            ep.shutdown()


def test_tcp_peer_close_raises_channel_closed():
    eps = _tcp()
    try:
        eps["a"].send("b", 0, 0, 1, RingTensor.zeros((2,), Backend.INT64))
        eps["a"].close()
        assert eps["b"].recv("a", 0, 0).shape == (2,)  # delivered before the close
        with pytest.raises(ChannelClosed):
            eps["b"].recv("a", 1, 0)
    finally:
        for ep in eps.values():
            ep.shutdown()


def test_tcp_connect_failure():
    from mpctensor.runtime import TcpEndpoint

    ports = free_ports(2)
    ep = TcpEndpoint("a", {"a": f"127.0.0.1:{ports[0]}", "b": f"127.0.0.1:{ports[1]}"}, timeout=0.3)
    with pytest.raises(ConnectFailed):
        ep.start()
    ep.shutdown()


def demo_plan(backend="int64", trunc="interactive"):
    b = PlanBuilder(backend, trunc_mode=trunc)
    x = b.input("client", "x", (3, 4))
    w = b.input("owner", "w", (4, 2))
    mx = b.masked(x)
    y = b.truncate(b.matmul(mx, b.masked(w)))
    sq = b.truncate(b.mul(mx, mx))
    b.output(y, "client", "y")
    o = b.output(sq, "client", "sq")
    b.plain(o, "argmax", "cls")
    return b.build()


def demo_inputs():
    rng = np.random.default_rng(0)
    return {"client": {"x": rng.uniform(-1, 1, (3, 4))}, "owner": {"w": rng.uniform(-1, 1, (4, 2))}}


@pytest.mark.parametrize("backend,trunc", [("int64", "interactive"), ("int64", "local"), ("int100", "interactive")])
def test_inmemory_session_correct(backend, trunc):
    plan, inputs = demo_plan(backend, trunc), demo_inputs()
    res = run_inmemory(plan, inputs, seed=4)
    out = res.outputs["client"]
    x, w = inputs["client"]["x"], inputs["owner"]["w"]
    tol = 4.0 / plan.fixed.scale
    assert np.allclose(out["y"], x @ w, atol=tol * 4)
    assert np.allclose(out["sq"], x * x, atol=tol)
    assert out["cls"].shape == (3,)
    assert res.received[SERVER2] == 0
    assert res.stats == predicted_stats(plan)


def test_tcp_equals_inmemory():
    plan, inputs = demo_plan(), demo_inputs()
    a = run_inmemory(plan, inputs, seed=8, session_id=2)
    b = run_tcp_local(plan, inputs, seed=8, session_id=2)
    for k in a.outputs["client"]:
        assert np.array_equal(a.outputs["client"][k], b.outputs["client"][k])
    assert a.stats == b.stats


def test_seeded_sessions_are_deterministic():
    plan, inputs = demo_plan(), demo_inputs()
    a = run_inmemory(plan, inputs, seed=8)
    b = run_inmemory(plan, inputs, seed=8)
    assert np.array_equal(a.outputs["client"]["y"], b.outputs["client"]["y"])


def test_missing_input_fails_cleanly():
    plan = demo_plan()
    with pytest.raises(KeyError):
        run_inmemory(plan, {"client": demo_inputs()["client"], "owner": {}}, seed=1, timeout=2)


def test_wrong_input_shape_fails_cleanly():
    plan = demo_plan()
    bad = demo_inputs()
    bad["owner"]["w"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        run_inmemory(plan, bad, seed=1, timeout=2)


CONFIG = """
# five local processes
session_id = 4
backend = int64
truncation = interactive
seed = 12
network = logreg
batch = 2
party.server0 = 127.0.0.1:9000
party.server1 = 127.0.0.1:9001
party.server2 = 127.0.0.1:9002
party.owner = 127.0.0.1:9003
party.client = 127.0.0.1:9004
"""


def test_session_config_round_trip():
    cfg = SessionConfig.parse(CONFIG)
    assert cfg.session_id == 4 and cfg.seed == 12 and cfg.batch == 2
    assert cfg.parties["client"] == "127.0.0.1:9004"
    again = SessionConfig.parse(cfg.dump())
    assert again.dump() == cfg.dump()


@pytest.mark.parametrize("text", [
    "nonsense",
    CONFIG.replace("party.server2 = 127.0.0.1:9002\n", ""),
    CONFIG.replace("backend = int64", "backend = int128"),
    CONFIG.replace("backend = int64", "backend = int100").replace("interactive", "local"),
    CONFIG.replace("batch = 2", "batch = two"),
])
def test_session_config_errors(text):
    with pytest.raises(ConfigError):
        SessionConfig.parse(text)


def test_concurrent_sessions_do_not_interfere():
    plan, inputs = demo_plan(), demo_inputs()
    results = {}

    def go(i):
        results[i] = run_inmemory(plan, inputs, seed=i).outputs["client"]["y"]

    threads = [threading.Thread(target=go, args=(i,)) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for y in results.values():
        assert np.allclose(y, inputs["client"]["x"] @ inputs["owner"]["w"], atol=0.01)

"""Plan execution for every party role, plus in-process runners and session config."""
from __future__ import annotations

import dataclasses
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .. import protocol as proto
from ..dealer import OFFLINE, ONLINE, distribute, iter_material, last_uses, receive_offline
from ..errors import ConfigError, MissingTriple
from ..plan import MASKED, SERVER0, SERVER1, SERVER2, SERVERS, ComputationPlan
from ..protocol import TruncMode
from ..ring import Backend, FixedPointConfig, RingTensor, decode, encode
from ..rng import RandomStream
from .channels import DEFAULT_TIMEOUT, ChannelStats, Endpoint, InMemoryNetwork, tcp_endpoints

__all__ = ["execute_plan", "run_inmemory", "run_tcp_local", "session_parties", "SessionConfig", "RunResult"]


def session_parties(plan: ComputationPlan) -> tuple[str, ...]:
    others = sorted(set(plan.providers()) | set(plan.receivers()))
    return (SERVER0, SERVER1, SERVER2, *others)


def _at_scale(cfg: FixedPointConfig, scale: int) -> FixedPointConfig:
    return dataclasses.replace(cfg, frac_bits=scale)


def _trunc_cfg(plan: ComputationPlan) -> proto.TruncationConfig:
    return proto.TruncationConfig.from_fixed(plan.fixed, plan.trunc_mode)


def public_value(plan: ComputationPlan, node) -> RingTensor:
    return encode(node.attrs["value"], _at_scale(plan.fixed, node.scale), plan.backend, plan.crt)


def input_stream(seed, session_id: int, plan_id: int, node_id: int, provider: str) -> RandomStream:
    if seed is None:
        return RandomStream.from_os()
    return RandomStream.derive(seed, "input", session_id, plan_id, node_id, provider)


def execute_plan(plan: ComputationPlan, role: str, endpoint: Endpoint,
                 inputs: Mapping[str, Any] | None = None, seed=None, session_id: int = 0) -> dict | None:
    """Run ``role``'s part of ``plan``. Receivers get their revealed outputs back."""
    endpoint.bind(plan.plan_id, session_id)
    if role == SERVER2:
        distribute(iter_material(plan, seed, session_id), plan, endpoint)
        return None
    if role in SERVERS:
        _run_server(plan, SERVERS.index(role), endpoint)
        return None
    if role in plan.providers():
        _provide(plan, role, endpoint, inputs or {}, seed, session_id)
    if role in plan.receivers():
        return _receive(plan, role, endpoint)
    return {}


def _provide(plan, role, endpoint, inputs, seed, session_id) -> None:
    for n in plan.inputs:
        if n.party != role:
            continue
        name = n.attrs["name"]
        if name not in inputs:
            raise KeyError(f"{role} has no input named {name!r}")
        value = np.asarray(inputs[name], dtype=np.float64)
        if value.shape != n.shape:
            raise ValueError(f"input {name!r}: expected shape {n.shape}, got {value.shape}")
        x = encode(value, _at_scale(plan.fixed, n.scale), plan.backend, plan.crt)
        s0, s1 = proto.share_split(x, input_stream(seed, session_id, plan.plan_id, n.id, role))
        endpoint.send(SERVER0, n.id, 0, ONLINE, s0)
        endpoint.send(SERVER1, n.id, 0, ONLINE, s1)


def _run_server(plan: ComputationPlan, i: int, endpoint: Endpoint) -> None:
    peer = SERVERS[1 - i]
    store = receive_offline(plan, endpoint)
    tcfg = _trunc_cfg(plan)
    vals: dict[int, Any] = {}
    last = last_uses(plan)

    def material(node_id: int, tag: int = 0) -> RingTensor:
        try:
            return store.pop((node_id, tag))
        except KeyError:
            raise MissingTriple(f"no offline material for node {node_id} tag {tag}") from None

    def exchange(node_id: int, mine: RingTensor, shape) -> RingTensor:
        endpoint.send(peer, node_id, 0, ONLINE, mine)
        theirs = endpoint.recv(peer, node_id, 0, expect_shape=shape)
        return mine + theirs if i == 0 else theirs + mine

    for n in plan.nodes:
        op = n.op
        if op == "input":
            vals[n.id] = endpoint.recv(n.party, n.id, 0, expect_shape=n.shape)
        elif op == "public":
            vals[n.id] = public_value(plan, n)
        elif op == "mask":
            a_i = material(n.id)
            alpha = exchange(n.id, proto.mask_diff(vals[n.inputs[0]], a_i), n.shape)
            vals[n.id] = (a_i, alpha)
        elif op == "bilinear":
            (ax, alpha_x), (ay, alpha_y) = (vals[j] for j in n.inputs)
            vals[n.id] = proto.bilinear_share(i, n.attrs["bilinear"], alpha_x, alpha_y, ax, ay, material(n.id),
                                              n.attrs.get("geom"))
        elif op == "truncate":
            x_i = vals[n.inputs[0]]
            if plan.trunc_mode is TruncMode.LOCAL:
                vals[n.id] = proto.trunc_local_share(i, x_i, tcfg)
            else:
                c = exchange(n.id, proto.trunc_open_share(i, x_i, material(n.id, 0), tcfg), n.shape)
                vals[n.id] = proto.trunc_finish(i, c, material(n.id, 1), tcfg)
        elif op == "add":
            vals[n.id] = vals[n.inputs[0]] + vals[n.inputs[1]]
        elif op == "sub":
            vals[n.id] = vals[n.inputs[0]] - vals[n.inputs[1]]
        elif op == "neg":
            vals[n.id] = -vals[n.inputs[0]]
        elif op == "add_plain":
            x_i, c = vals[n.inputs[0]], vals[n.inputs[1]]
            vals[n.id] = x_i + c if i == 0 else x_i
        elif op == "mul_plain":
            vals[n.id] = vals[n.inputs[0]] * vals[n.inputs[1]]
        elif op == "local":
            kind, params = n.attrs["local"], n.attrs["params"]
            if n.kind == MASKED:
                parts = [vals[j] for j in n.inputs]
                vals[n.id] = (proto.apply_local(kind, [p[0] for p in parts], **params),
                              proto.apply_local(kind, [p[1] for p in parts], **params))
            else:
                vals[n.id] = proto.apply_local(kind, [vals[j] for j in n.inputs], **params)
        elif op == "output":
            endpoint.send(n.party, n.id, 0, ONLINE, vals[n.inputs[0]])
        elif op == "plain":
            continue
        else:
            raise ValueError(f"unknown op {op!r}")
        for j in n.inputs:
            if last[j] == n.id:
                vals.pop(j, None)


PLAIN_FNS = {
    "identity": lambda z: z,
    "sigmoid": lambda z: 1.0 / (1.0 + np.exp(-z)),
    "argmax": lambda z: np.argmax(z, axis=-1),
}


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


PLAIN_FNS["softmax"] = softmax


def _receive(plan: ComputationPlan, role: str, endpoint: Endpoint) -> dict[str, np.ndarray]:
    clear: dict[int, np.ndarray] = {}
    out: dict[str, np.ndarray] = {}
    for n in plan.nodes:
        if n.party != role:
            continue
        if n.op == "output":
            s0 = endpoint.recv(SERVER0, n.id, 0, expect_shape=n.shape)
            s1 = endpoint.recv(SERVER1, n.id, 0, expect_shape=n.shape)
            clear[n.id] = decode(s0 + s1, plan.fixed, scale_bits=n.scale)
            out[n.attrs["name"]] = clear[n.id]
        elif n.op == "plain":
            clear[n.id] = PLAIN_FNS[n.attrs["fn"]](clear[n.inputs[0]])
            out[n.attrs["name"]] = clear[n.id]
    return out


# -- in-process runners ---------------------------------------------------------

@dataclass
class RunResult:
    outputs: dict[str, dict[str, np.ndarray]]
    stats: ChannelStats
    received: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0


def _run_parties(plan, endpoints: Mapping[str, Endpoint], inputs, seed, session_id) -> dict:
    results: dict[str, Any] = {}
    errors: list[BaseException] = []

    def worker(name: str) -> None:
        ep = endpoints[name]
        try:
            results[name] = execute_plan(plan, name, ep, inputs.get(name), seed, session_id)
        except BaseException as exc:  # surfaced to the caller below
            errors.append(exc)
        finally:
            # S2 leaves right after the offline phase; nothing online may need it.
            if name == SERVER2 or errors:
                ep.close()

    threads = [threading.Thread(target=worker, args=(p,), name=f"party-{p}") for p in endpoints]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for ep in endpoints.values():
        ep.close()
    if errors:
        raise errors[0]
    return {p: r for p, r in results.items() if p not in (SERVER0, SERVER1, SERVER2)}


# every party shares one interpreter, so a slow peer is not a stalled one
INPROCESS_TIMEOUT = 600.0


def run_inmemory(plan: ComputationPlan, inputs: Mapping[str, Mapping[str, Any]], seed=None,
                 session_id: int = 0, timeout: float = INPROCESS_TIMEOUT) -> RunResult:
    net = InMemoryNetwork(session_parties(plan), session_id, plan.crt, timeout)
    t0 = time.perf_counter()
    outputs = _run_parties(plan, net.endpoints, inputs, seed, session_id)
    elapsed = time.perf_counter() - t0
    return RunResult(outputs, net.stats, {p: ep.mailbox.received for p, ep in net.endpoints.items()}, elapsed)


def free_ports(n: int) -> list[int]:
    socks = [socket.socket() for _ in range(n)]
    try:
        for s in socks:
            s.bind(("127.0.0.1", 0))
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


def run_tcp_local(plan: ComputationPlan, inputs: Mapping[str, Mapping[str, Any]], seed=None,
                  session_id: int = 0, timeout: float = DEFAULT_TIMEOUT) -> RunResult:
    """Every party in this process, talking over loopback TCP."""
    parties = session_parties(plan)
    addresses = {p: f"127.0.0.1:{port}" for p, port in zip(parties, free_ports(len(parties)))}
    stats = ChannelStats()
    eps = tcp_endpoints(addresses, session_id, plan.crt, timeout, stats)
    t0 = time.perf_counter()
    try:
        outputs = _run_parties(plan, eps, inputs, seed, session_id)
    finally:
        for ep in eps.values():
            ep.shutdown()
    elapsed = time.perf_counter() - t0
    return RunResult(outputs, stats, {p: ep.mailbox.received for p, ep in eps.items()}, elapsed)


# -- session config -----------------------------------------------------------

@dataclass
class SessionConfig:
    """Text key-value session description shared by every party process.

    Keys: ``session_id``, ``backend``, ``frac_bits``, ``bound_bits``,
    ``stat_sec``, ``truncation``, ``seed`` (omit for OS entropy),
    ``network``, ``batch``, ``timeout``, and one ``party.<name> = host:port``
    line per party.
    """

    parties: dict[str, str]
    session_id: int = 1
    backend: Backend = Backend.INT64
    fixed: FixedPointConfig | None = None
    truncation: TruncMode = TruncMode.INTERACTIVE
    seed: int | None = None
    network: str = "logreg"
    batch: int = 1
    timeout: float = DEFAULT_TIMEOUT
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.fixed is None:
            self.fixed = FixedPointConfig.network(self.backend)

    @classmethod
    def parse(cls, text: str) -> SessionConfig:
        kv: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key = value")
            kv[key.strip()] = value.strip()
        parties = {k[len("party."):]: v for k, v in kv.items() if k.startswith("party.")}
        for required in (SERVER0, SERVER1, SERVER2):
            if required not in parties:
                raise ConfigError(f"config lacks party.{required}")
        try:
            backend = Backend.parse(kv.get("backend", "int64"))
            preset = FixedPointConfig.network(backend)
            fixed = FixedPointConfig(int(kv.get("frac_bits", preset.frac_bits)),
                                     int(kv.get("bound_bits", preset.bound_bits)),
                                     int(kv.get("stat_sec", preset.stat_sec))).validate(backend)
            cfg = cls(parties=parties, session_id=int(kv.get("session_id", 1)), backend=backend, fixed=fixed,
                      truncation=TruncMode.parse(kv.get("truncation", "interactive")),
                      seed=int(kv["seed"]) if "seed" in kv else None, network=kv.get("network", "logreg"),
                      batch=int(kv.get("batch", 1)), timeout=float(kv.get("timeout", DEFAULT_TIMEOUT)),
                      extra={k: v for k, v in kv.items() if not k.startswith("party.")})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if cfg.truncation is TruncMode.LOCAL and backend is not Backend.INT64:
            raise ConfigError("local truncation requires backend int64")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> SessionConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.parse(text)

    def dump(self) -> str:
        lines = [f"session_id = {self.session_id}", f"backend = {self.backend.value}",
                 f"frac_bits = {self.fixed.frac_bits}", f"bound_bits = {self.fixed.bound_bits}",
                 f"stat_sec = {self.fixed.stat_sec}", f"truncation = {self.truncation.value}",
                 f"network = {self.network}", f"batch = {self.batch}", f"timeout = {self.timeout:g}"]
        if self.seed is not None:
            lines.append(f"seed = {self.seed}")
        lines += [f"party.{name} = {addr}" for name, addr in self.parties.items()]
        return "\n".join(lines) + "\n"

"""Point-to-point channels between parties: in-memory and TCP.

Both transports push the exact same encoded frames, so message and byte
accounting is identical whichever one carries a session. Receiving is
tag-matched on (sender, node id, tag); frames from one sender for one key
are delivered in send order.
"""
from __future__ import annotations

import logging
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, asdict
from typing import Sequence

from ..errors import ChannelClosed, ChannelTimeout, ConnectFailed, ProtocolDesync
from ..ring import CrtParams, DEFAULT_CRT, RingTensor
from .wire import LENGTH, Frame, decode_body, decode_frame, encode_frame, header_size

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
PHASE_NAMES = {0: "offline", 1: "online"}
_HELLO = struct.Struct("<QH")


@dataclass
class LinkStats:
    messages: int = 0
    payload_bytes: int = 0
    frame_bytes: int = 0

    def __iadd__(self, other: LinkStats) -> LinkStats:
        self.messages += other.messages
        self.payload_bytes += other.payload_bytes
        self.frame_bytes += other.frame_bytes
        return self


class ChannelStats:
    """Per (sender, receiver, phase) message and byte counters."""

    def __init__(self):
        self._links: dict[tuple[str, str, str], LinkStats] = defaultdict(LinkStats)
        self._lock = threading.Lock()

    def record(self, sender: str, receiver: str, phase: int | str, payload: int, frame: int) -> None:
        phase = PHASE_NAMES.get(phase, phase)
        with self._lock:
            link = self._links[(sender, receiver, phase)]
            link.messages += 1
            link.payload_bytes += payload
            link.frame_bytes += frame

    def merge(self, other: ChannelStats) -> ChannelStats:
        for key, link in other.links().items():
            with self._lock:
                self._links[key] += link
        return self

    def links(self) -> dict[tuple[str, str, str], LinkStats]:
        with self._lock:
            return {k: LinkStats(**asdict(v)) for k, v in self._links.items()}

    def total(self, phase: str | None = None, sender: str | None = None,
              receiver: str | None = None) -> LinkStats:
        out = LinkStats()
        phase = PHASE_NAMES.get(phase, phase)
        for (s, r, p), link in self.links().items():
            if (phase is None or p == phase) and (sender is None or s == sender) and (receiver is None or r == receiver):
                out += link
        return out

    def rows(self) -> list[dict]:
        return [{"sender": s, "receiver": r, "phase": p, **asdict(v)}
                for (s, r, p), v in sorted(self.links().items(), key=lambda kv: (kv[0][2], kv[0][0], kv[0][1]))]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChannelStats):
            return NotImplemented
        return self.links() == other.links()

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"ChannelStats({self.rows()})"


class Mailbox:
    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._cond = threading.Condition()
        self._queues: dict[tuple[int, int, int], deque[Frame]] = defaultdict(deque)
        self._closed_peers: set[int] = set()
        self._closed = False
        self._error: Exception | None = None
        self.received = 0

    def put(self, frame: Frame) -> None:
        with self._cond:
            self._queues[(frame.sender, frame.node_id, frame.tag)].append(frame)
            self.received += 1
            self._cond.notify_all()

    def peer_closed(self, peer: int) -> None:
        with self._cond:
            self._closed_peers.add(peer)
            self._cond.notify_all()

    def fail(self, exc: Exception) -> None:
        with self._cond:
            self._error = exc
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def get(self, sender: int, node_id: int, tag: int, timeout: float | None = None) -> Frame:
        key = (sender, node_id, tag)
        deadline = time.monotonic() + (self.timeout if timeout is None else timeout)
        with self._cond:
            while True:
                if self._error is not None:
                    raise self._error
                q = self._queues.get(key)
                if q:
                    frame = q.popleft()
                    if not q:
                        del self._queues[key]
                    return frame
                if self._closed:
                    raise ChannelClosed("endpoint is closed")
                if sender in self._closed_peers:
                    raise ChannelClosed(f"peer {sender} closed before sending node {node_id}/{tag}")
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise ChannelTimeout(f"no frame from peer {sender} for node {node_id}/{tag}")
                self._cond.wait(remaining)

    def pending(self) -> int:
        with self._cond:
            return sum(len(q) for q in self._queues.values())


class Endpoint:
    """One party's view of the session network."""

    def __init__(self, name: str, parties: Sequence[str], session_id: int = 0,
                 crt: CrtParams = DEFAULT_CRT, timeout: float = DEFAULT_TIMEOUT,
                 stats: ChannelStats | None = None):
        if name not in parties:
            raise ValueError(f"{name!r} is not a session party")
        self.name = name
        self.parties = tuple(parties)
        self.index = self.parties.index(name)
        self.session_id = session_id
        self.plan_id = 0
        self.crt = crt
        self.stats = stats if stats is not None else ChannelStats()
        self.mailbox = Mailbox(timeout)
        self.closed = False

    def bind(self, plan_id: int, session_id: int | None = None) -> None:
        self.plan_id = plan_id
        if session_id is not None:
            self.session_id = session_id

    def send(self, receiver: str, node_id: int, tag: int, phase: int, tensor: RingTensor) -> None:
        if self.closed:
            raise ChannelClosed("endpoint is closed")
        frame = Frame(self.session_id, self.plan_id, node_id, tag, self.index, self.parties.index(receiver),
                      phase, tensor)
        data = encode_frame(frame)
        self._transmit(frame.receiver, data)
        self.stats.record(self.name, receiver, phase, len(data) - LENGTH.size - header_size(tensor.ndim), len(data))

    def recv(self, sender: str, node_id: int, tag: int = 0, expect_shape: Sequence[int] | None = None) -> RingTensor:
        frame = self.mailbox.get(self.parties.index(sender), node_id, tag)
        if frame.session_id != self.session_id or frame.plan_id != self.plan_id:
            raise ProtocolDesync(f"frame for session {frame.session_id}/plan {frame.plan_id:x} "
                                 f"while running {self.session_id}/{self.plan_id:x}")
        if expect_shape is not None and tuple(frame.tensor.shape) != tuple(expect_shape):
            raise ProtocolDesync(f"node {node_id}: expected shape {tuple(expect_shape)}, got {frame.tensor.shape}")
        return frame.tensor

    def _transmit(self, receiver: int, data: bytes) -> None:
        raise NotImplementedError

    def close(self) -> None:
        self.closed = True
        self.mailbox.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InMemoryNetwork:
    """All parties of a session inside one process."""

    def __init__(self, parties: Sequence[str], session_id: int = 0, crt: CrtParams = DEFAULT_CRT,
                 timeout: float = DEFAULT_TIMEOUT, stats: ChannelStats | None = None):
        self.parties = tuple(parties)
        self.stats = stats if stats is not None else ChannelStats()
        self.endpoints = {p: InMemoryEndpoint(self, p, session_id, crt, timeout) for p in self.parties}

    def endpoint(self, name: str) -> InMemoryEndpoint:
        return self.endpoints[name]

    def close(self) -> None:
        for ep in self.endpoints.values():
            ep.close()


class InMemoryEndpoint(Endpoint):
    def __init__(self, network: InMemoryNetwork, name: str, session_id: int, crt: CrtParams, timeout: float):
        super().__init__(name, network.parties, session_id, crt, timeout, network.stats)
        self.network = network

    def _transmit(self, receiver: int, data: bytes) -> None:
        target = self.network.endpoints[self.parties[receiver]]
        if target.closed:
            raise ChannelClosed(f"{target.name} is closed")
        target.mailbox.put(decode_frame(data, self.crt))

    def close(self) -> None:
        if self.closed:
            return
        super().close()
        for ep in self.network.endpoints.values():
            if ep is not self:
                ep.mailbox.peer_closed(self.index)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


class TcpEndpoint(Endpoint):
    """Full-mesh TCP: each party dials every higher-indexed peer and accepts the rest."""

    def __init__(self, name: str, addresses: dict[str, str], parties: Sequence[str] | None = None,
                 session_id: int = 0, crt: CrtParams = DEFAULT_CRT, timeout: float = DEFAULT_TIMEOUT,
                 stats: ChannelStats | None = None):
        parties = tuple(parties or addresses)
        super().__init__(name, parties, session_id, crt, timeout, stats)
        self.addresses = {p: parse_address(a) for p, a in addresses.items()}
        self.timeout = timeout
        self._socks: dict[int, socket.socket] = {}
        self._send_locks: dict[int, threading.Lock] = {}
        self._ready = threading.Condition()
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []

    @property
    def expected_peers(self) -> set[int]:
        return {i for i in range(len(self.parties)) if i != self.index}

    def start(self) -> TcpEndpoint:
        return self.listen_only().connect()

    def listen_only(self) -> TcpEndpoint:
        """Bind the listening socket now so peers started later can dial in."""
        inbound = [i for i in self.expected_peers if i < self.index]
        if inbound and self._listener is None:
            self._listener = socket.create_server(self.addresses[self.name], reuse_port=False)
            self._listener.settimeout(0.2)
            t = threading.Thread(target=self._accept_loop, args=(len(inbound),), daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def connect(self) -> TcpEndpoint:
        for peer in sorted(i for i in self.expected_peers if i > self.index):
            self._dial(peer)
        self._wait_connected()
        return self

    def _dial(self, peer: int) -> None:
        addr = self.addresses[self.parties[peer]]
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                sock = socket.create_connection(addr, timeout=self.timeout)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise ConnectFailed(f"{self.name}: cannot reach {self.parties[peer]} at {addr}: {exc}") from None
                time.sleep(0.05)
        sock.sendall(_HELLO.pack(self.session_id, self.index))
        self._register(peer, sock)

    def _accept_loop(self, expected: int) -> None:
        accepted = 0
        while accepted < expected and not self.closed:
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.settimeout(self.timeout)
            try:
                sid, peer = _HELLO.unpack(_recv_exact(sock, _HELLO.size))
            except (OSError, ChannelClosed):
                sock.close()
                continue
            if sid != self.session_id or peer not in self.expected_peers:
                log.warning("%s: rejecting connection from peer %s session %s", self.name, peer, sid)
                sock.close()
                continue
            self._register(peer, sock)
            accepted += 1
        self._listener.close()

    def _register(self, peer: int, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(None)
        with self._ready:
            self._socks[peer] = sock
            self._send_locks[peer] = threading.Lock()
            self._ready.notify_all()
        t = threading.Thread(target=self._read_loop, args=(peer, sock), daemon=True)
        t.start()
        self._threads.append(t)

    def _wait_connected(self) -> None:
        deadline = time.monotonic() + self.timeout
        with self._ready:
            while set(self._socks) != self.expected_peers:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = [self.parties[i] for i in self.expected_peers - set(self._socks)]
                    raise ConnectFailed(f"{self.name}: peers never connected: {missing}")
                self._ready.wait(remaining)

    def _read_loop(self, peer: int, sock: socket.socket) -> None:
        try:
            while True:
                head = _recv_exact(sock, LENGTH.size)
                (n,) = LENGTH.unpack(head)
                frame = decode_body(_recv_exact(sock, n), self.crt)
                if frame.sender != peer:
                    raise ProtocolDesync(f"frame claims sender {frame.sender} on link from {peer}")
                self.mailbox.put(frame)
        except ChannelClosed:
            pass
        except ProtocolDesync as exc:
            self.mailbox.fail(exc)
        except OSError:
            pass
        finally:
            self.mailbox.peer_closed(peer)

    def _transmit(self, receiver: int, data: bytes) -> None:
        sock = self._socks.get(receiver)
        if sock is None:
            raise ChannelClosed(f"no connection to {self.parties[receiver]}")
        try:
            with self._send_locks[receiver]:
                sock.sendall(data)
        except OSError as exc:
            raise ChannelClosed(f"send to {self.parties[receiver]} failed: {exc}") from None

    def close(self) -> None:
        if self.closed:
            return
        super().close()
        for sock in self._socks.values():
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass

    def shutdown(self) -> None:
        """Close sockets completely (after the peers are done with us)."""
        self.close()
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ChannelClosed("connection closed")
        got += k
    return bytes(buf)


def tcp_endpoints(addresses: dict[str, str], session_id: int = 0, crt: CrtParams = DEFAULT_CRT,
                  timeout: float = DEFAULT_TIMEOUT, stats: ChannelStats | None = None) -> dict[str, TcpEndpoint]:
    """Connected TCP endpoints for every party, all inside this process."""
    parties = tuple(addresses)
    eps = {p: TcpEndpoint(p, addresses, parties, session_id, crt, timeout, stats) for p in parties}
    for ep in eps.values():
        ep.listen_only()
    threads = [threading.Thread(target=ep.connect) for ep in eps.values()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for ep in eps.values():
        ep._wait_connected()
    return eps

"""Static computation plans.

A plan is an ordered, acyclic list of nodes with fully static shapes and
fixed-point scales. Because the whole computation is known up front, the
crypto producer can prepare every mask, product and truncation pair before
any input arrives, and the expected traffic can be predicted exactly.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from .errors import ModeUnsupported, PlanError, ScaleMismatch, ShapeMismatch, UnresolvedShape
from .protocol import BilinearKind, LocalKind, TruncMode, apply_local
from .ring import Backend, Conv2DGeometry, CrtParams, DEFAULT_CRT, FixedPointConfig, RingTensor

SERVER0, SERVER1, SERVER2 = "server0", "server1", "server2"
SERVERS = (SERVER0, SERVER1)

PRIVATE, MASKED, PUBLIC, CLEAR = "private", "masked", "public", "clear"
PLAIN_FUNCTIONS = ("softmax", "argmax", "sigmoid", "identity")


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    scale: int
    kind: str
    party: str | None = None
    attrs: dict[str, Any] = field(default_factory=dict, compare=False)

    def describe(self) -> dict[str, Any]:
        attrs = {}
        for k, v in sorted(self.attrs.items()):
            if isinstance(v, np.ndarray):
                attrs[k] = hashlib.blake2b(np.ascontiguousarray(v, dtype="<f8").tobytes()
                                           + str(v.shape).encode(), digest_size=16).hexdigest()
            elif isinstance(v, Conv2DGeometry):
                attrs[k] = [v.stride, v.padding]
            else:
                attrs[k] = v
        return {"id": self.id, "op": self.op, "in": list(self.inputs), "shape": list(self.shape),
                "scale": self.scale, "kind": self.kind, "party": self.party, "attrs": attrs}


@dataclass(frozen=True)
class ComputationPlan:
    nodes: tuple[Node, ...]
    backend: Backend
    fixed: FixedPointConfig
    trunc_mode: TruncMode
    crt: CrtParams = DEFAULT_CRT

    @cached_property
    def plan_id(self) -> int:
        blob = json.dumps({"backend": self.backend.value, "fixed": [self.fixed.frac_bits, self.fixed.bound_bits,
                                                                     self.fixed.stat_sec],
                           "trunc": self.trunc_mode.value, "crt": list(self.crt.moduli),
                           "nodes": [n.describe() for n in self.nodes]}, sort_keys=True, default=str)
        return int.from_bytes(hashlib.blake2b(blob.encode(), digest_size=8).digest(), "little")

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def by_op(self, *ops: str) -> list[Node]:
        return [n for n in self.nodes if n.op in ops]

    @property
    def inputs(self) -> list[Node]:
        return self.by_op("input")

    @property
    def outputs(self) -> list[Node]:
        return self.by_op("output")

    def providers(self) -> list[str]:
        return sorted({n.party for n in self.inputs})

    def receivers(self) -> list[str]:
        return sorted({n.party for n in self.outputs})

    def validate(self) -> ComputationPlan:
        masked_sources = Counter()
        for pos, n in enumerate(self.nodes):
            if n.id != pos:
                raise PlanError("node ids must equal their position")
            if any(i >= n.id for i in n.inputs):
                raise PlanError(f"node {n.id} depends on a later node (cycle)")
            if any(d < 0 for d in n.shape):
                raise UnresolvedShape(f"node {n.id} has unresolved shape {n.shape}")
            if n.op == "mask":
                masked_sources[n.inputs[0]] += 1
            if n.op == "bilinear" and any(self.nodes[i].kind != MASKED for i in n.inputs):
                raise PlanError(f"bilinear node {n.id} has an unmasked input")
        twice = [k for k, c in masked_sources.items() if c > 1]
        if twice:
            raise PlanError(f"tensors masked more than once: {twice}")
        return self


class PlanBuilder:
    """Incrementally builds a :class:`ComputationPlan` with shape and scale inference."""

    def __init__(self, backend: Backend | str = Backend.INT64, fixed: FixedPointConfig | None = None,
                 trunc_mode: TruncMode | str = TruncMode.INTERACTIVE, crt: CrtParams = DEFAULT_CRT):
        self.backend = Backend.parse(backend)
        self.fixed = (fixed or FixedPointConfig.default(self.backend)).validate(self.backend, crt)
        self.trunc_mode = TruncMode.parse(trunc_mode)
        if self.trunc_mode is TruncMode.LOCAL and self.backend is not Backend.INT64:
            raise ModeUnsupported("local optimistic truncation needs the int64 ring")
        self.crt = crt
        self.nodes: list[Node] = []
        self._mask_of: dict[int, int] = {}

    @property
    def f(self) -> int:
        return self.fixed.frac_bits

    def _add(self, op: str, inputs: Sequence[int], shape: Sequence[int], scale: int, kind: str,
             party: str | None = None, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise PlanError(f"unknown node {i}")
        node = Node(len(self.nodes), op, tuple(int(i) for i in inputs), tuple(int(d) for d in shape),
                    scale, kind, party, attrs)
        self.nodes.append(node)
        return node.id

    def node(self, ref: int) -> Node:
        return self.nodes[ref]

    def shape(self, ref: int) -> tuple[int, ...]:
        return self.nodes[ref].shape

    # -- sources ------------------------------------------------------
    def input(self, provider: str, name: str, shape: Sequence[int], scale: int | None = None) -> int:
        if provider in (SERVER0, SERVER1, SERVER2):
            raise PlanError("servers cannot act as input providers")
        if any(n.op == "input" and n.party == provider and n.attrs["name"] == name for n in self.nodes):
            raise PlanError(f"duplicate input {provider}:{name}")
        return self._add("input", (), shape, self.f if scale is None else scale, PRIVATE, provider, name=name)

    def public(self, value, scale: int | None = None) -> int:
        value = np.asarray(value, dtype=np.float64)
        return self._add("public", (), value.shape, self.f if scale is None else scale, PUBLIC, value=value)

    # -- masking ------------------------------------------------------
    def mask(self, ref: int) -> int:
        n = self.nodes[ref]
        if n.kind != PRIVATE:
            raise PlanError(f"only private tensors can be masked (node {ref} is {n.kind})")
        if ref in self._mask_of:
            raise PlanError(f"node {ref} is already masked; every tensor is masked once")
        m = self._add("mask", (ref,), n.shape, n.scale, MASKED)
        self._mask_of[ref] = m
        return m

    def masked(self, ref: int) -> int:
        """Masked view of ``ref``, creating the mask node on first use."""
        if self.nodes[ref].kind == MASKED:
            return ref
        return self._mask_of.get(ref) or self.mask(ref)

    # -- multiplicative -------------------------------------------------
    def bilinear(self, kind: BilinearKind | str, x: int, y: int, geom: Conv2DGeometry | None = None) -> int:
        kind = BilinearKind(kind)
        nx, ny = self.nodes[x], self.nodes[y]
        if nx.kind != MASKED or ny.kind != MASKED:
            raise PlanError("bilinear operations need masked inputs; use masked() first")
        if nx.scale + ny.scale > 2 * self.f:
            raise PlanError("multiplying an untruncated product; truncate first")
        if kind is BilinearKind.MUL:
            if nx.shape != ny.shape:
                raise ShapeMismatch(f"mul {nx.shape} vs {ny.shape}")
            shape = nx.shape
        elif kind is BilinearKind.MATMUL:
            if len(nx.shape) != 2 or len(ny.shape) != 2 or nx.shape[1] != ny.shape[0]:
                raise ShapeMismatch(f"matmul {nx.shape} x {ny.shape}")
            shape = (nx.shape[0], ny.shape[1])
        else:
            geom = geom or Conv2DGeometry()
            shape = geom.output_shape(nx.shape, ny.shape)
        attrs = {"bilinear": kind.value}
        if kind is BilinearKind.CONV2D:
            attrs["geom"] = geom
        return self._add("bilinear", (x, y), shape, nx.scale + ny.scale, PRIVATE, **attrs)

    def mul(self, x: int, y: int) -> int:
        return self.bilinear(BilinearKind.MUL, x, y)

    def matmul(self, x: int, y: int) -> int:
        return self.bilinear(BilinearKind.MATMUL, x, y)

    def conv2d(self, x: int, y: int, geom: Conv2DGeometry = Conv2DGeometry()) -> int:
        return self.bilinear(BilinearKind.CONV2D, x, y, geom)

    def truncate(self, ref: int) -> int:
        n = self.nodes[ref]
        if n.kind != PRIVATE:
            raise PlanError("truncate takes a private tensor")
        if n.scale != 2 * self.f:
            raise PlanError(f"truncate expects scale 2f={2 * self.f}, got {n.scale}")
        return self._add("truncate", (ref,), n.shape, n.scale - self.f, PRIVATE)

    # -- linear ---------------------------------------------------------
    def _binary(self, op: str, p: int, q: int) -> int:
        np_, nq = self.nodes[p], self.nodes[q]
        if np_.kind != PRIVATE or nq.kind != PRIVATE:
            raise PlanError(f"{op} takes private tensors")
        if np_.shape != nq.shape:
            raise ShapeMismatch(f"{op} {np_.shape} vs {nq.shape}")
        if np_.scale != nq.scale:
            raise ScaleMismatch(f"{op} of scales {np_.scale} and {nq.scale}")
        return self._add(op, (p, q), np_.shape, np_.scale, PRIVATE)

    def add(self, p: int, q: int) -> int:
        return self._binary("add", p, q)

    def sub(self, p: int, q: int) -> int:
        return self._binary("sub", p, q)

    def neg(self, p: int) -> int:
        n = self.nodes[p]
        if n.kind != PRIVATE:
            raise PlanError("neg takes a private tensor")
        return self._add("neg", (p,), n.shape, n.scale, PRIVATE)

    def _plain(self, op: str, p: int, c: int) -> int:
        np_, nc = self.nodes[p], self.nodes[c]
        if np_.kind != PRIVATE or nc.kind != PUBLIC:
            raise PlanError(f"{op} takes (private, public)")
        if nc.shape not in ((), np_.shape):
            raise ShapeMismatch(f"{op} public operand {nc.shape} vs {np_.shape}")
        if op == "add_plain":
            if nc.scale != np_.scale:
                    raise ScaleMismatch(f"add_plain of scales {np_.scale} and {nc.scale}")
            scale = np_.scale
        else:
            scale = np_.scale + nc.scale
        return self._add(op, (p, c), np_.shape, scale, PRIVATE)

    def add_plain(self, p: int, c: int) -> int:
        return self._plain("add_plain", p, c)

    def mul_plain(self, p: int, c: int) -> int:
        return self._plain("mul_plain", p, c)

    def local(self, kind: LocalKind | str, inputs: Sequence[int], **params) -> int:
        kind = LocalKind(kind)
        ns = [self.nodes[i] for i in inputs]
        kinds = {n.kind for n in ns}
        if len(kinds) != 1 or kinds & {PUBLIC, CLEAR}:
            raise PlanError("local op inputs must be all private or all masked")
        if len({n.scale for n in ns}) != 1:
            raise ScaleMismatch("local op over mixed scales")
        dummies = [RingTensor.zeros(n.shape, Backend.INT64) for n in ns]
        shape = apply_local(kind, dummies, **params).shape
        return self._add("local", inputs, shape, ns[0].scale, ns[0].kind, local=kind.value, params=params)

    def reshape(self, ref: int, shape: Sequence[int]) -> int:
        return self.local(LocalKind.RESHAPE, [ref], shape=tuple(int(d) for d in shape))

    def transpose(self, ref: int, axes: Sequence[int] | None = None) -> int:
        return self.local(LocalKind.TRANSPOSE, [ref], axes=None if axes is None else tuple(axes))

    # -- sinks ----------------------------------------------------------
    def output(self, ref: int, receiver: str, name: str) -> int:
        n = self.nodes[ref]
        if n.kind != PRIVATE:
            raise PlanError("only private tensors can be revealed")
        if receiver in (SERVER0, SERVER1, SERVER2):
            raise PlanError("servers cannot receive outputs")
        return self._add("output", (ref,), n.shape, n.scale, CLEAR, receiver, name=name)

    def plain(self, ref: int, fn: str, name: str) -> int:
        n = self.nodes[ref]
        if n.kind != CLEAR:
            raise PlanError("plaintext functions run on revealed outputs")
        if fn not in PLAIN_FUNCTIONS:
            raise PlanError(f"unknown plaintext function {fn!r}")
        shape = n.shape[:-1] if fn == "argmax" else n.shape
        return self._add("plain", (ref,), shape, 0, CLEAR, n.party, fn=fn, name=name)

    def build(self) -> ComputationPlan:
        return ComputationPlan(tuple(self.nodes), self.backend, self.fixed, self.trunc_mode, self.crt).validate()


# -- static traffic prediction -------------------------------------------------

def offline_messages(plan: ComputationPlan) -> list[tuple[int, int, str, tuple[int, ...]]]:
    """(node id, tag, recipient, shape) for every offline frame S2 sends."""
    out = []
    for n in plan.nodes:
        if n.op in ("mask", "bilinear"):
            out += [(n.id, 0, s, n.shape) for s in SERVERS]
        elif n.op == "truncate" and plan.trunc_mode is TruncMode.INTERACTIVE:
            out += [(n.id, tag, s, n.shape) for tag in (0, 1) for s in SERVERS]
    return out


def online_messages(plan: ComputationPlan) -> list[tuple[int, int, str, str, tuple[int, ...]]]:
    """(node id, tag, sender, recipient, shape) for every online frame."""
    out = []
    for n in plan.nodes:
        if n.op == "input":
            out += [(n.id, 0, n.party, s, n.shape) for s in SERVERS]
        elif n.op == "mask" or (n.op == "truncate" and plan.trunc_mode is TruncMode.INTERACTIVE):
            out += [(n.id, 0, SERVER0, SERVER1, n.shape), (n.id, 0, SERVER1, SERVER0, n.shape)]
        elif n.op == "output":
            out += [(n.id, 0, s, n.party, n.shape) for s in SERVERS]
    return out

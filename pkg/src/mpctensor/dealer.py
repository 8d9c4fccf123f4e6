"""Offline phase run by the crypto producer S2.

Material is generated per plan, one random stream per (node, purpose), so the
bundle is reproducible from the seed and independent of generation order.
With ``seed=None`` the master key comes from the OS and nothing is
reproducible.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from . import ring
from .plan import MASKED, SERVER0, SERVER1, SERVER2, ComputationPlan, offline_messages
from .protocol import (BilinearKind, MaskMaterial, ProductMaterial, TruncMaterial, TruncMode,
                       apply_bilinear, apply_local)
from .ring import Backend, CrtParams, FixedPointConfig, RingTensor
from .rng import RandomStream

OFFLINE, ONLINE = 0, 1


def node_stream(seed: int | bytes, session_id: int, plan_id: int, node_id: int, purpose: str) -> RandomStream:
    return RandomStream.derive(seed, "dealer", session_id, plan_id, node_id, purpose)


def mask_material(shape: Sequence[int], backend: Backend, stream: RandomStream,
                  crt: CrtParams | None = None) -> MaskMaterial:
    a = ring.sample_uniform(shape, backend, stream, crt)
    a0 = ring.sample_uniform(shape, backend, stream, crt)
    return MaskMaterial(a, a0, a - a0)


def product_material(kind: BilinearKind | str, ax: RingTensor, ay: RingTensor, stream: RandomStream,
                     geom=None) -> ProductMaterial:
    c = apply_bilinear(kind, ax, ay, geom)
    c0 = ring.sample_uniform(c.shape, c.backend, stream, c.crt)
    return ProductMaterial(c0, c - c0)


def truncation_pair(shape: Sequence[int], backend: Backend, fixed: FixedPointConfig, stream: RandomStream,
                    crt: CrtParams | None = None) -> tuple[RingTensor, RingTensor]:
    """Random ``r`` uniform in ``[0, 2^(b+k))`` and ``r' = floor(r / 2^f)``."""
    shape = tuple(shape)
    n = 1
    for d in shape:
        n *= d
    f = fixed.frac_bits
    hi = ring.limbs_to_ring(stream.bits(n, fixed.bound_bits + fixed.stat_sec - f), shape, backend, crt)
    lo = ring.limbs_to_ring(stream.bits(n, f), shape, backend, crt)
    r = hi * RingTensor.constant(1 << f, backend, hi.crt) + lo
    return r, hi


def truncation_material(shape: Sequence[int], backend: Backend, fixed: FixedPointConfig, stream: RandomStream,
                        crt: CrtParams | None = None) -> TruncMaterial:
    r, rp = truncation_pair(shape, backend, fixed, stream, crt)
    r0 = ring.sample_uniform(r.shape, backend, stream, crt)
    rp0 = ring.sample_uniform(r.shape, backend, stream, crt)
    return TruncMaterial(r0, r - r0, rp0, rp - rp0)


@dataclass
class OfflineBundle:
    plan_id: int
    masks: dict[int, MaskMaterial] = field(default_factory=dict)
    products: dict[int, ProductMaterial] = field(default_factory=dict)
    truncs: dict[int, TruncMaterial] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.masks) + len(self.products) + len(self.truncs)

    def server_view(self, i: int) -> dict[tuple[int, int], RingTensor]:
        """Everything S_i receives, keyed by (node id, tag)."""
        view = {}
        for nid, m in self.masks.items():
            view[(nid, 0)] = m.a0 if i == 0 else m.a1
        for nid, p in self.products.items():
            view[(nid, 0)] = p.c0 if i == 0 else p.c1
        for nid, t in self.truncs.items():
            view[(nid, 0)] = t.r0 if i == 0 else t.r1
            view[(nid, 1)] = t.rp0 if i == 0 else t.rp1
        return view


def last_uses(plan: ComputationPlan) -> dict[int, int]:
    """Id of the last node that reads each node's value."""
    last: dict[int, int] = {}
    for n in plan.nodes:
        for j in n.inputs:
            last[j] = n.id
    return last


def iter_material(plan: ComputationPlan, seed: int | bytes | None = None,
                  session_id: int = 0) -> Iterator[tuple[int, object]]:
    """Yield ``(node id, material)`` in node order.

    Mask values are kept only until their last reader, so peak memory tracks
    the widest point of the plan rather than its total size.
    """
    if seed is None:
        seed = os.urandom(16)
    pid = plan.plan_id
    last = last_uses(plan)
    mask_values: dict[int, RingTensor] = {}
    for n in plan.nodes:
        if n.op == "mask":
            m = mask_material(n.shape, plan.backend, node_stream(seed, session_id, pid, n.id, "mask"), plan.crt)
            mask_values[n.id] = m.a
            yield n.id, m
        elif n.op == "local" and n.kind == MASKED:
            mask_values[n.id] = apply_local(n.attrs["local"], [mask_values[i] for i in n.inputs],
                                            **n.attrs["params"])
        elif n.op == "bilinear":
            ax, ay = (mask_values[i] for i in n.inputs)
            yield n.id, product_material(n.attrs["bilinear"], ax, ay,
                                         node_stream(seed, session_id, pid, n.id, "product"), n.attrs.get("geom"))
        elif n.op == "truncate" and plan.trunc_mode is TruncMode.INTERACTIVE:
            yield n.id, truncation_material(n.shape, plan.backend, plan.fixed,
                                            node_stream(seed, session_id, pid, n.id, "trunc"), plan.crt)
        for j in n.inputs:
            if last.get(j) == n.id:
                mask_values.pop(j, None)


def generate_offline(plan: ComputationPlan, seed: int | bytes | None = None, session_id: int = 0) -> OfflineBundle:
    bundle = OfflineBundle(plan.plan_id)
    for node_id, m in iter_material(plan, seed, session_id):
        if isinstance(m, MaskMaterial):
            bundle.masks[node_id] = m
        elif isinstance(m, ProductMaterial):
            bundle.products[node_id] = m
        else:
            bundle.truncs[node_id] = m
    return bundle


def _shares(m, i: int) -> list[RingTensor]:
    if isinstance(m, MaskMaterial):
        return [m.a0 if i == 0 else m.a1]
    if isinstance(m, ProductMaterial):
        return [m.c0 if i == 0 else m.c1]
    return [m.r0, m.rp0] if i == 0 else [m.r1, m.rp1]


def distribute(material: OfflineBundle | Iterable[tuple[int, object]], plan: ComputationPlan, endpoint) -> None:
    """Send each server exactly its shares, tagged as offline traffic.

    ``material`` is a bundle or the lazy output of :func:`iter_material`;
    frames leave in the order :func:`offline_messages` predicts.
    """
    if isinstance(material, OfflineBundle):
        views = {SERVER0: material.server_view(0), SERVER1: material.server_view(1)}
        for node_id, tag, recipient, _shape in offline_messages(plan):
            endpoint.send(recipient, node_id, tag, OFFLINE, views[recipient][(node_id, tag)])
        return
    for node_id, m in material:
        for i, server in enumerate((SERVER0, SERVER1)):
            for tag, share in enumerate(_shares(m, i)):
                endpoint.send(server, node_id, tag, OFFLINE, share)


def receive_offline(plan: ComputationPlan, endpoint) -> dict[tuple[int, int], RingTensor]:
    """Server side of :func:`distribute`."""
    store = {}
    for node_id, tag, recipient, shape in offline_messages(plan):
        if recipient == endpoint.name:
            store[(node_id, tag)] = endpoint.recv(SERVER2, node_id, tag, expect_shape=shape)
    return store

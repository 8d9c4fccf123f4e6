"""Single-machine fixed-point simulation of a plan, with no secret sharing.

Each node is evaluated on the plaintext ring value. Masks are identities,
bilinear nodes apply the plain ring kernel, and truncation applies the exact
integer rule. Interactive truncation in the real protocol adds a carry that
depends on the crypto producer's random ``r``; pass the session seed as
``replay_seed`` to regenerate that ``r`` and reproduce the protocol bit for
bit. Without it, truncation is an exact floor.
"""
from __future__ import annotations

import dataclasses
from typing import Any, Mapping

import numpy as np

from .dealer import node_stream, truncation_pair
from .plan import ComputationPlan
from .protocol import TruncMode, apply_bilinear, apply_local
from .ring import RingTensor, decode, encode, floor_div_pow2
from .runtime.session import PLAIN_FNS


def truncate_clear(x: RingTensor, f: int, b: int, r: RingTensor | None = None,
                   rp: RingTensor | None = None) -> RingTensor:
    offset = RingTensor.constant(1 << b, x.backend, x.crt)
    shift = RingTensor.constant(1 << (b - f), x.backend, x.crt)
    if r is None:
        return floor_div_pow2(x + offset, f) - shift
    return floor_div_pow2(x + offset + r, f) - rp - shift


def run_clear(plan: ComputationPlan, inputs: Mapping[str, Mapping[str, Any]], replay_seed=None,
              session_id: int = 0) -> dict[str, dict[str, np.ndarray]]:
    vals: dict[int, Any] = {}
    out: dict[str, dict[str, np.ndarray]] = {}
    fx = plan.fixed
    replay = replay_seed is not None and plan.trunc_mode is TruncMode.INTERACTIVE
    for n in plan.nodes:
        op = n.op
        if op == "input":
            value = np.asarray(inputs[n.party][n.attrs["name"]], dtype=np.float64)
            vals[n.id] = encode(value, dataclasses.replace(fx, frac_bits=n.scale), plan.backend, plan.crt)
        elif op == "public":
            vals[n.id] = encode(n.attrs["value"], dataclasses.replace(fx, frac_bits=n.scale), plan.backend, plan.crt)
        elif op == "mask":
            vals[n.id] = vals[n.inputs[0]]
        elif op == "bilinear":
            vals[n.id] = apply_bilinear(n.attrs["bilinear"], vals[n.inputs[0]], vals[n.inputs[1]], n.attrs.get("geom"))
        elif op == "truncate":
            r = rp = None
            if replay:
                stream = node_stream(replay_seed, session_id, plan.plan_id, n.id, "trunc")
                r, rp = truncation_pair(n.shape, plan.backend, fx, stream, plan.crt)
            vals[n.id] = truncate_clear(vals[n.inputs[0]], fx.frac_bits, fx.bound_bits, r, rp)
        elif op in ("add", "add_plain"):
            vals[n.id] = vals[n.inputs[0]] + vals[n.inputs[1]]
        elif op == "sub":
            vals[n.id] = vals[n.inputs[0]] - vals[n.inputs[1]]
        elif op == "neg":
            vals[n.id] = -vals[n.inputs[0]]
        elif op == "mul_plain":
            vals[n.id] = vals[n.inputs[0]] * vals[n.inputs[1]]
        elif op == "local":
            vals[n.id] = apply_local(n.attrs["local"], [vals[j] for j in n.inputs], **n.attrs["params"])
        elif op == "output":
            vals[n.id] = decode(vals[n.inputs[0]], fx, scale_bits=n.scale)
            out.setdefault(n.party, {})[n.attrs["name"]] = vals[n.id]
        elif op == "plain":
            vals[n.id] = PLAIN_FNS[n.attrs["fn"]](vals[n.inputs[0]])
            out.setdefault(n.party, {})[n.attrs["name"]] = vals[n.id]
    return out

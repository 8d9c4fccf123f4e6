"""One party of a networked inference session, as run by a separate process."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import WeightsContainer, load_idx, synthetic_digits
from .errors import ConfigError
from .plan import ComputationPlan
from .runtime import ChannelStats, SessionConfig, TcpEndpoint, execute_plan, session_parties

log = logging.getLogger(__name__)


@dataclass
class PartyResult:
    role: str
    outputs: dict | None
    stats: ChannelStats


def session_plan(cfg: SessionConfig) -> tuple[nn.ModelSpec, ComputationPlan]:
    model = nn.build_network(cfg.network)
    plan = nn.build_inference_plan(model, cfg.batch, cfg.backend, cfg.fixed, cfg.truncation)
    return model, plan


def owner_weights(model: nn.ModelSpec, weights_path: str | Path | None, seed: int | None) -> dict[str, np.ndarray]:
    if weights_path is not None:
        return WeightsContainer.load(weights_path).as_dict()
    log.warning("no weights file; owner uses random calibrated weights")
    calib = synthetic_digits(64, 101)[0].reshape(64, *model.input_shape)
    return nn.random_weights(model, seed or 0, calib)


def client_images(model: nn.ModelSpec, batch: int, images_path: str | Path | None, offset: int = 0) -> np.ndarray:
    if images_path is not None:
        x = load_idx(images_path)[offset:offset + batch]
    else:
        x = synthetic_digits(batch, 1)[0]
    if len(x) < batch:
        raise ConfigError(f"need {batch} images, found {len(x)}")
    return x.reshape(batch, *model.input_shape)


def run_party(cfg: SessionConfig, role: str, weights_path=None, images_path=None) -> PartyResult:
    """Join the session described by ``cfg`` as ``role`` and run it to completion."""
    model, plan = session_plan(cfg)
    parties = session_parties(plan)
    missing = [p for p in parties if p not in cfg.parties]
    if missing:
        raise ConfigError(f"config lacks addresses for {', '.join(missing)}")
    if role not in parties:
        raise ConfigError(f"role {role!r} is not one of {', '.join(parties)}")
    inputs = None
    if role == nn.OWNER:
        model.weights = owner_weights(model, weights_path, cfg.seed)
        inputs = nn.plan_inputs(model, np.zeros((cfg.batch, *model.input_shape)))[nn.OWNER]
    elif role == nn.CLIENT:
        inputs = {"x": client_images(model, cfg.batch, images_path)}
    stats = ChannelStats()
    ep = TcpEndpoint(role, {p: cfg.parties[p] for p in parties}, parties, cfg.session_id, plan.crt,
                     cfg.timeout, stats)
    try:
        ep.start()
        outputs = execute_plan(plan, role, ep, inputs, cfg.seed, cfg.session_id)
    finally:
        ep.shutdown()
    return PartyResult(role, outputs, stats)

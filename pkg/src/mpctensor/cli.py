"""Command-line entry point.

``party`` runs one role of a networked session. ``predict``, ``bench`` and
``plan-stats`` build a service request and either hand it to the service
code in this process or post it to a running service with ``--remote``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import nn
from .data import WeightsContainer, accuracy, load_idx, make_fixtures, train_logreg_plaintext
from .errors import ChannelClosed, ChannelTimeout, ConfigError, ConnectFailed, MpcError, ProtocolDesync
from .party import run_party
from .protocol import TruncMode
from .ring import Backend
from .runtime import SessionConfig
from .runtime.session import free_ports
from .schemas import BenchRequest, PlanStatsRequest, PredictRequest

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
ROLES = ("server0", "server1", "server2", nn.OWNER, nn.CLIENT)


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)


def _stats_csv(rows: list[dict]) -> str:
    fields = ["phase", "sender", "receiver", "messages", "payload_bytes", "frame_bytes"]
    return ",".join(fields) + "\n" + "".join(",".join(str(r[f]) for f in fields) + "\n" for r in rows)


def _post(remote: str, path: str, body: dict, method: str = "post") -> dict:
    import httpx

    with httpx.Client(base_url=remote, timeout=None) as client:
        resp = client.request(method.upper(), path, json=body)
    if resp.status_code != 200:
        raise MpcError(f"service returned {resp.status_code}: {resp.text}")
    return resp.json()


def _registry(args):
    from .service import ModelRegistry

    registry = ModelRegistry()
    if args.weights:
        registry.put(args.network, WeightsContainer.load(args.weights).as_dict())
    return registry


def _upload_weights(args) -> None:
    if args.weights:
        tensors = {k: v.tolist() for k, v in WeightsContainer.load(args.weights).as_dict().items()}
        _post(args.remote, f"/models/{args.network}/weights", {"tensors": tensors}, "put")


# -- commands -----------------------------------------------------------------

def cmd_party(args) -> int:
    cfg = SessionConfig.load(args.config)
    result = run_party(cfg, args.role, args.weights, args.images)
    if result.outputs:
        probs = result.outputs["probs"]
        for i, row in enumerate(probs):
            print(f"sample {i}: class {int(np.argmax(row))} probs " + " ".join(f"{p:.4f}" for p in row))
    _write(args.stats_out, benchmod.stats_report(result.stats, "csv"))
    return EXIT_OK


def cmd_predict(args) -> int:
    images = labels = None
    if args.images:
        images = load_idx(args.images)[args.offset:args.offset + args.batch]
        if args.labels:
            labels = load_idx(args.labels)[args.offset:args.offset + args.batch].tolist()
    req = PredictRequest(network=args.network, backend=args.backend, trunc=args.trunc, seed=args.seed,
                         weights_seed=args.weights_seed, transport=args.transport,
                         images=None if images is None else images.tolist(),
                         synthetic=0 if images is not None else args.batch, labels=labels)
    if args.remote:
        _upload_weights(args)
        resp = _post(args.remote, "/predict", req.model_dump())
    else:
        from .service import predict

        resp = predict(req, _registry(args)).model_dump()
    for i, (cls, row) in enumerate(zip(resp["predictions"], resp["probs"])):
        print(f"sample {i}: class {cls} probs " + " ".join(f"{p:.4f}" for p in row))
    if resp["accuracy"] is not None:
        print(f"accuracy {100 * resp['accuracy']:.2f}%")
    print(f"{resp['seconds'] * 1e3:.1f} ms, {resp['plan_nodes']} plan nodes")
    _write(args.stats_out, _stats_csv(resp["stats"]))
    return EXIT_OK


def cmd_bench(args) -> int:
    backends = args.backend or ["int64"]
    batches = args.batch or [1, 10, 100]
    if args.remote or (args.images is None and args.labels is None):
        req = BenchRequest(network=args.network, backends=backends, batch_sizes=batches, runs=args.runs,
                           trunc=args.trunc, seed=args.seed, weights_seed=args.weights_seed,
                           eval_samples=args.samples)
        if args.remote:
            _upload_weights(args)
            resp = _post(args.remote, "/bench", req.model_dump())
        else:
            from .service import run_bench

            resp = run_bench(req, _registry(args)).model_dump()
        text, csv = resp["text"], resp["csv"]
    else:
        images = load_idx(args.images)
        labels = load_idx(args.labels) if args.labels else None
        if args.samples:
            images = images[:args.samples]
            labels = None if labels is None else labels[:args.samples]
        weights = WeightsContainer.load(args.weights).as_dict() if args.weights else None
        report = benchmod.bench(args.network, backends, batches, args.runs, args.trunc, args.seed or 0,
                                weights, images, labels)
        text, csv = report.text(), report.csv()
    print(text, end="")
    _write(args.csv_out, csv)
    if args.stats_out:
        req = PlanStatsRequest(network=args.network, backend=backends[0], trunc=args.trunc, batch=batches[0])
        from .service import plan_stats

        _write(args.stats_out, _stats_csv([r.model_dump() for r in plan_stats(req).stats]))
    return EXIT_OK


def cmd_plan_stats(args) -> int:
    req = PlanStatsRequest(network=args.network, backend=args.backend, trunc=args.trunc, batch=args.batch)
    if args.remote:
        resp = _post(args.remote, "/plan/stats", req.model_dump())
    else:
        from .service import plan_stats

        resp = plan_stats(req).model_dump()
    print(f"plan {resp['plan_id']}: {resp['nodes']} nodes " + json.dumps(resp["ops"], sort_keys=True))
    print(_stats_csv(resp["stats"]), end="")
    _write(args.stats_out, _stats_csv(resp["stats"]))
    return EXIT_OK


def cmd_train_logreg(args) -> int:
    images, labels = load_idx(args.images), load_idx(args.labels)
    result = train_logreg_plaintext(images, labels, args.epochs, args.lr, seed=args.seed or 0)
    for epoch, loss in enumerate(result.losses, 1):
        print(f"epoch {epoch}: loss {loss:.4f}")
    if args.test_images and args.test_labels:
        model = nn.build_network("logreg")
        model.weights = result.weights.as_dict()
        x = load_idx(args.test_images)
        logits = nn.plaintext_eval(model, x.reshape(len(x), -1))
        print(f"test accuracy {100 * accuracy(logits, load_idx(args.test_labels)):.2f}%")
    result.weights.save(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_make_fixtures(args) -> int:
    for name, path in make_fixtures(args.directory, args.train, args.test, args.seed or 0).items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_make_config(args) -> int:
    ports = free_ports(len(ROLES)) if args.base_port is None else [args.base_port + i for i in range(len(ROLES))]
    cfg = SessionConfig(parties={r: f"{args.host}:{p}" for r, p in zip(ROLES, ports)},
                        session_id=args.session_id, backend=Backend.parse(args.backend),
                        truncation=TruncMode.parse(args.trunc), seed=args.seed, network=args.network,
                        batch=args.batch)
    SessionConfig.parse(cfg.dump())  # same checks as a party would apply
    Path(args.out).write_text(cfg.dump())
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cmd_poly(args) -> int:
    fit = nn.poly_relu_fit(args.degree)
    print("coeffs (lowest first): " + " ".join(f"{c:.8g}" for c in fit.coeffs))
    print(f"max error on [{fit.interval[0]:g}, {fit.interval[1]:g}]: {fit.max_error:.6g}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _session_flags(p: argparse.ArgumentParser, batch_multi: bool = False) -> None:
    p.add_argument("--network", choices=["A", "B", "C", "logreg"], default="logreg")
    if batch_multi:
        p.add_argument("--backend", choices=["int64", "int100"], action="append",
                       help="repeat for several backends (default int64)")
        p.add_argument("--batch", type=int, action="append", help="repeat for several batch sizes (default 1 10 100)")
    else:
        p.add_argument("--backend", choices=["int64", "int100"], default="int64")
        p.add_argument("--batch", type=int, default=1)
    p.add_argument("--trunc", choices=["interactive", "local"], default="interactive")
    p.add_argument("--seed", type=int, default=None, help="session seed (default: OS entropy)")
    p.add_argument("--stats-out", help="write channel statistics CSV here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpctensor", description="Three-server secure tensor inference.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("party", help="run one party of a networked session")
    p.add_argument("--role", required=True, choices=ROLES)
    p.add_argument("--config", required=True)
    p.add_argument("--weights", help="weights container (owner only)")
    p.add_argument("--images", help="IDX images (client only)")
    p.add_argument("--stats-out")
    p.set_defaults(fn=cmd_party)

    p = sub.add_parser("predict", help="private prediction for one batch")
    _session_flags(p)
    p.add_argument("--weights")
    p.add_argument("--weights-seed", type=int, default=0)
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--transport", choices=["tcp", "inmemory"], default="inmemory")
    p.add_argument("--remote", help="service base URL, e.g. http://127.0.0.1:8000")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("bench", help="runtime, accuracy and KL report")
    _session_flags(p, batch_multi=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--weights")
    p.add_argument("--weights-seed", type=int, default=0)
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--samples", type=int, default=0, help="evaluation samples (synthetic when no images)")
    p.add_argument("--csv-out")
    p.add_argument("--remote")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("plan-stats", help="predicted traffic of an inference plan")
    _session_flags(p)
    p.add_argument("--remote")
    p.set_defaults(fn=cmd_plan_stats)

    p = sub.add_parser("train-logreg", help="train softmax regression in plaintext")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_logreg)

    p = sub.add_parser("make-fixtures", help="write synthetic IDX digit files")
    p.add_argument("directory")
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--test", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_make_fixtures)

    p = sub.add_parser("make-config", help="write a session config for five local processes")
    _session_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--base-port", type=int)
    p.add_argument("--session-id", type=int, default=1)
    p.set_defaults(fn=cmd_make_config)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("poly", help="print the polynomial ReLU fit")
    p.add_argument("--degree", type=int, default=4)
    p.set_defaults(fn=cmd_poly)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConnectFailed, ProtocolDesync, ChannelTimeout, ChannelClosed) as exc:
        print(f"session failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (MpcError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

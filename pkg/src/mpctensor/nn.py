"""Inference networks over the secure protocol, plus plaintext references.

Models are lists of layer specs lowered onto a :class:`PlanBuilder`. The
input provider ``client`` supplies the images and receives the logits; the
model owner ``owner`` supplies every weight tensor as a private input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DegreeTooLow, MissingWeights, NegativeVariance, ShapeMismatch
from .plan import ComputationPlan, PlanBuilder
from .protocol import LocalKind, TruncMode
from .ring import Backend, Conv2DGeometry, CrtParams, DEFAULT_CRT, FixedPointConfig, im2col
from .runtime.session import softmax

OWNER, CLIENT = "owner", "client"
RELU_INTERVAL = (-3.0, 3.0)
BN_EPS = 1e-5


# -- activation fit -----------------------------------------------------------

@dataclass(frozen=True)
class PolyFit:
    coeffs: tuple[float, ...]  # lowest degree first
    max_error: float
    interval: tuple[float, float] = RELU_INTERVAL

    def __call__(self, t):
        return np.polynomial.polynomial.polyval(t, self.coeffs)


def poly_relu_fit(degree: int = 4, interval: tuple[float, float] = RELU_INTERVAL, points: int = 1001) -> PolyFit:
    """Least-squares polynomial fit of max(0, t) on ``interval``.

    ``max_error`` is measured on a grid ten times denser than the fit grid.
    """
    if degree < 2:
        raise DegreeTooLow(f"degree must be at least 2, got {degree}")
    lo, hi = interval
    t = np.linspace(lo, hi, points)
    coeffs = np.polynomial.polynomial.polyfit(t, np.maximum(t, 0.0), degree)
    dense = np.linspace(lo, hi, 10 * (points - 1) + 1)
    err = np.max(np.abs(np.polynomial.polynomial.polyval(dense, coeffs) - np.maximum(dense, 0.0)))
    return PolyFit(tuple(float(c) for c in coeffs), float(err), (float(lo), float(hi)))


def fold_batchnorm(gamma, beta, mean, var, eps: float = BN_EPS) -> tuple[np.ndarray, np.ndarray]:
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise NegativeVariance("batchnorm variance must be non-negative")
    inv = np.asarray(gamma, dtype=np.float64) / np.sqrt(var + eps)
    return inv, np.asarray(beta, dtype=np.float64) - inv * np.asarray(mean, dtype=np.float64)


# -- layer specs --------------------------------------------------------------

@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    weight: str
    bias: str


@dataclass(frozen=True)
class Conv2D:
    field: int
    channels: int
    in_channels: int
    weight: str
    bias: str
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class AvgPool:
    window: int


@dataclass(frozen=True)
class BatchNormFolded:
    scale: str
    shift: str


@dataclass(frozen=True)
class PolyActivation:
    coeffs: tuple[float, ...]
    interval: tuple[float, float] = RELU_INTERVAL


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Union[Dense, Conv2D, AvgPool, BatchNormFolded, PolyActivation, Flatten]


@dataclass
class ModelSpec:
    name: str
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shape after each layer (input first)."""
        shape = self.input_shape
        out = [shape]
        for layer in self.layers:
            shape = _layer_shape(layer, shape)
            out.append(shape)
        return out

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer, in_shape in zip(self.layers, self.shapes()):
            if isinstance(layer, Dense):
                shapes[layer.weight] = (layer.in_features, layer.out_features)
                shapes[layer.bias] = (layer.out_features,)
            elif isinstance(layer, Conv2D):
                shapes[layer.weight] = (layer.field, layer.field, layer.in_channels, layer.channels)
                shapes[layer.bias] = (layer.channels,)
            elif isinstance(layer, BatchNormFolded):
                shapes[layer.scale] = (in_shape[-1],)
                shapes[layer.shift] = (in_shape[-1],)
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.weight_shapes().values())

    def check_weights(self) -> None:
        for name, shape in self.weight_shapes().items():
            if name not in self.weights:
                raise MissingWeights(name)
            if tuple(np.shape(self.weights[name])) != shape:
                raise ShapeMismatch(f"weight {name}: expected {shape}, got {np.shape(self.weights[name])}")

    def to_manifest(self) -> str:
        lines = [f"model {self.name}", "input " + " ".join(map(str, self.input_shape))]
        for layer in self.layers:
            if isinstance(layer, Dense):
                lines.append(f"dense {layer.in_features} {layer.out_features} {layer.weight} {layer.bias}")
            elif isinstance(layer, Conv2D):
                lines.append(f"conv2d {layer.field} {layer.channels} {layer.in_channels} {layer.stride} "
                             f"{layer.padding} {layer.weight} {layer.bias}")
            elif isinstance(layer, AvgPool):
                lines.append(f"avgpool {layer.window}")
            elif isinstance(layer, BatchNormFolded):
                lines.append(f"batchnorm {layer.scale} {layer.shift}")
            elif isinstance(layer, PolyActivation):
                lines.append("poly " + " ".join(repr(v) for v in (*layer.interval, *layer.coeffs)))
            else:
                lines.append("flatten")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> ModelSpec:
        name, input_shape, layers = "model", (), []
        for raw in text.splitlines():
            parts = raw.split()
            if not parts:
                continue
            head, args = parts[0], parts[1:]
            if head == "model":
                name = args[0]
            elif head == "input":
                input_shape = tuple(int(a) for a in args)
            elif head == "dense":
                layers.append(Dense(int(args[0]), int(args[1]), args[2], args[3]))
            elif head == "conv2d":
                layers.append(Conv2D(int(args[0]), int(args[1]), int(args[2]), args[5], args[6],
                                     int(args[3]), int(args[4])))
            elif head == "avgpool":
                layers.append(AvgPool(int(args[0])))
            elif head == "batchnorm":
                layers.append(BatchNormFolded(args[0], args[1]))
            elif head == "poly":
                vals = [float(a) for a in args]
                layers.append(PolyActivation(tuple(vals[2:]), (vals[0], vals[1])))
            elif head == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown manifest line {raw!r}")
        return cls(name, layers, input_shape)


def _layer_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Dense):
        if shape != (layer.in_features,):
            raise ShapeMismatch(f"dense expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Conv2D):
        geom = Conv2DGeometry(layer.stride, layer.padding)
        out = geom.output_shape((1, *shape), (layer.field, layer.field, layer.in_channels, layer.channels))
        return out[1:]
    if isinstance(layer, AvgPool):
        h, w, c = shape
        if h % layer.window or w % layer.window:
            raise ShapeMismatch(f"avgpool {layer.window} does not tile {h}x{w}")
        return (h // layer.window, w // layer.window, c)
    if isinstance(layer, Flatten):
        return (math.prod(shape),)
    return shape


# -- the three benchmark networks and logistic regression ----------------------

def build_network(which: str, activation: PolyFit | None = None) -> ModelSpec:
    """Layer sequence for network A, B, C or ``logreg`` (VALID convolutions)."""
    act = activation or poly_relu_fit(4)
    poly = PolyActivation(act.coeffs, act.interval)
    which = which.upper() if which.lower() != "logreg" else "logreg"
    if which == "logreg":
        return ModelSpec("logreg", [Dense(784, 10, "fc/w", "fc/b")], (784,))
    if which == "A":
        layers = [Dense(784, 128, "fc1/w", "fc1/b"), BatchNormFolded("bn1/scale", "bn1/shift"), poly,
                  Dense(128, 128, "fc2/w", "fc2/b"), BatchNormFolded("bn2/scale", "bn2/shift"), poly,
                  Dense(128, 10, "fc3/w", "fc3/b")]
        return ModelSpec("A", layers, (784,))
    if which in ("B", "C"):
        c1, c2, hidden = (16, 16, 100) if which == "B" else (20, 50, 500)
        layers = [Conv2D(5, c1, 1, "conv1/w", "conv1/b"), BatchNormFolded("bn1/scale", "bn1/shift"), poly,
                  AvgPool(2),
                  Conv2D(5, c2, c1, "conv2/w", "conv2/b"), BatchNormFolded("bn2/scale", "bn2/shift"), poly,
                  AvgPool(2), Flatten(),
                  Dense(c2 * 16, hidden, "fc1/w", "fc1/b"), BatchNormFolded("bn3/scale", "bn3/shift"), poly,
                  Dense(hidden, 10, "fc2/w", "fc2/b")]
        return ModelSpec(which, layers, (28, 28, 1))
    raise ValueError(f"unknown network {which!r}")


def random_weights(model: ModelSpec, seed: int = 0, calibration: np.ndarray | None = None,
                   target: float = 2.5) -> dict[str, np.ndarray]:
    """Random in-range weights.

    Linear layers are Glorot-uniform, batchnorm parameters are drawn raw and
    folded. With a calibration batch, each batchnorm scale/shift pair is then
    shrunk so the following activation sees inputs within ``[-target, target]``
    on that batch.
    """
    rng = np.random.default_rng(seed)
    w: dict[str, np.ndarray] = {}
    for layer in model.layers:
        if isinstance(layer, (Dense, Conv2D)):
            if isinstance(layer, Dense):
                fan_in, fan_out, shape = layer.in_features, layer.out_features, (layer.in_features, layer.out_features)
                bias = layer.out_features
            else:
                fan_in = layer.field ** 2 * layer.in_channels
                fan_out = layer.field ** 2 * layer.channels
                shape = (layer.field, layer.field, layer.in_channels, layer.channels)
                bias = layer.channels
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            w[layer.weight] = rng.uniform(-lim, lim, shape)
            w[layer.bias] = rng.uniform(-0.1, 0.1, bias)
    shapes = model.weight_shapes()
    for layer in model.layers:
        if isinstance(layer, BatchNormFolded):
            (c,) = shapes[layer.scale]
            scale, shift = fold_batchnorm(rng.uniform(0.8, 1.2, c), rng.uniform(-0.2, 0.2, c),
                                          rng.uniform(-0.1, 0.1, c), rng.uniform(0.5, 1.5, c))
            w[layer.scale], w[layer.shift] = scale, shift
    if calibration is not None:
        x = np.asarray(calibration, dtype=np.float64)
        for layer in model.layers:
            if isinstance(layer, BatchNormFolded):
                y = x * w[layer.scale] + w[layer.shift]
                peak = float(np.max(np.abs(y)))
                if peak > target:
                    w[layer.scale] = w[layer.scale] * (target / peak)
                    w[layer.shift] = w[layer.shift] * (target / peak)
            x = _float_layer(layer, x, w)
    return w


# -- lowering onto a plan -----------------------------------------------------

def apply_layer(layer: LayerSpec, b: PlanBuilder, x: int, weights: Mapping[str, int]) -> int:
    """Append the secure lowering of ``layer`` to ``b`` and return the new node."""
    def weight(name: str) -> int:
        try:
            return weights[name]
        except KeyError:
            raise MissingWeights(name) from None

    if isinstance(layer, Dense):
        y = b.truncate(b.matmul(b.masked(x), b.masked(weight(layer.weight))))
        return b.add(y, b.local(LocalKind.BROADCAST, [weight(layer.bias)], shape=b.shape(y)))
    if isinstance(layer, Conv2D):
        y = b.truncate(b.conv2d(b.masked(x), b.masked(weight(layer.weight)),
                                Conv2DGeometry(layer.stride, layer.padding)))
        return b.add(y, b.local(LocalKind.BROADCAST, [weight(layer.bias)], shape=b.shape(y)))
    if isinstance(layer, BatchNormFolded):
        shape = b.shape(x)
        scale = b.local(LocalKind.BROADCAST, [b.masked(weight(layer.scale))], shape=shape)
        y = b.truncate(b.mul(b.masked(x), scale))
        return b.add(y, b.local(LocalKind.BROADCAST, [weight(layer.shift)], shape=shape))
    if isinstance(layer, AvgPool):
        s = b.local(LocalKind.WINDOW_SUM, [x], window=layer.window)
        return b.truncate(b.mul_plain(s, b.public(1.0 / layer.window ** 2)))
    if isinstance(layer, PolyActivation):
        c = layer.coeffs
        acc = b.add_plain(b.truncate(b.mul_plain(x, b.public(c[-1]))), b.public(c[-2]))
        for coef in reversed(c[:-2]):
            acc = b.add_plain(b.truncate(b.mul(b.masked(acc), b.masked(x))), b.public(coef))
        return acc
    if isinstance(layer, Flatten):
        shape = b.shape(x)
        return b.reshape(x, (shape[0], math.prod(shape[1:])))
    raise TypeError(f"unknown layer {layer!r}")


def build_inference_plan(model: ModelSpec, batch: int, backend: Backend | str = Backend.INT64,
                         fixed: FixedPointConfig | None = None,
                         trunc_mode: TruncMode | str = TruncMode.INTERACTIVE,
                         crt: CrtParams = DEFAULT_CRT) -> ComputationPlan:
    b = PlanBuilder(backend, fixed or FixedPointConfig.network(backend), trunc_mode, crt)
    x = b.input(CLIENT, "x", (batch, *model.input_shape))
    weights = {name: b.input(OWNER, name, shape) for name, shape in model.weight_shapes().items()}
    for layer in model.layers:
        x = apply_layer(layer, b, x, weights)
    logits = b.output(x, CLIENT, "logits")
    b.plain(logits, "softmax", "probs")
    return b.build()


def plan_inputs(model: ModelSpec, x: np.ndarray) -> dict[str, dict[str, np.ndarray]]:
    model.check_weights()
    return {CLIENT: {"x": np.asarray(x, dtype=np.float64)},
            OWNER: {k: np.asarray(v, dtype=np.float64) for k, v in model.weights.items()
                    if k in model.weight_shapes()}}


# -- plaintext evaluation -----------------------------------------------------

def _float_layer(layer: LayerSpec, x: np.ndarray, w: Mapping[str, np.ndarray]) -> np.ndarray:
    if isinstance(layer, Dense):
        return x @ w[layer.weight] + w[layer.bias]
    if isinstance(layer, Conv2D):
        geom = Conv2DGeometry(layer.stride, layer.padding)
        kern = w[layer.weight]
        n, h, wd, _ = x.shape
        oh, ow = geom.output_hw(h, wd, layer.field, layer.field)
        cols = im2col(x, layer.field, layer.field, geom)
        return (cols @ kern.reshape(-1, layer.channels)).reshape(n, oh, ow, layer.channels) + w[layer.bias]
    if isinstance(layer, BatchNormFolded):
        return x * w[layer.scale] + w[layer.shift]
    if isinstance(layer, AvgPool):
        n, h, wd, c = x.shape
        k = layer.window
        return x.reshape(n, h // k, k, wd // k, k, c).mean(axis=(2, 4))
    if isinstance(layer, PolyActivation):
        return np.polynomial.polynomial.polyval(x, layer.coeffs)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise TypeError(f"unknown layer {layer!r}")


def plaintext_eval(model: ModelSpec, x: np.ndarray, mode: str = "float", *,
                   backend: Backend | str = Backend.INT64, fixed: FixedPointConfig | None = None,
                   trunc_mode: TruncMode | str = TruncMode.INTERACTIVE, replay_seed=None,
                   session_id: int = 0) -> np.ndarray:
    """Logits from the float reference or the fixed-point simulation.

    ``mode="fixed"`` runs the same plan the secure protocol runs, on plaintext
    ring values; see :mod:`mpctensor.simulate` for what ``replay_seed`` does.
    """
    model.check_weights()
    x = np.asarray(x, dtype=np.float64)
    if mode == "float":
        for layer in model.layers:
            x = _float_layer(layer, x, model.weights)
        return x
    if mode != "fixed":
        raise ValueError(f"mode must be 'float' or 'fixed', got {mode!r}")
    from .simulate import run_clear

    plan = build_inference_plan(model, x.shape[0], backend, fixed, trunc_mode)
    return run_clear(plan, plan_inputs(model, x), replay_seed, session_id)[CLIENT]["logits"]


def float_probs(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    return softmax(plaintext_eval(model, x, "float"))

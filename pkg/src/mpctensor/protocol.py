"""Two-server additive sharing with explicit masked tensors.

Each protocol step is written twice over the same kernels: a per-party form
(``*_share`` functions taking the party index ``i``) used by the networked
runtime, and a whole-view form over :class:`PrivateTensor` /
:class:`MaskedTensor` that runs both parties locally. The whole-view form is
what tests and the single-process simulator use; it never reconstructs.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

from . import ring
from .errors import MissingTriple, ModeUnsupported, ScaleMismatch, ShapeMismatch, BackendMismatch
from .ring import Backend, Conv2DGeometry, FixedPointConfig, RingTensor
from .rng import RandomStream


@dataclass(frozen=True)
class PrivateTensor:
    share0: RingTensor
    share1: RingTensor
    scale: int = 0

    def __post_init__(self):
        if self.share0.backend is not self.share1.backend:
            raise BackendMismatch("shares on different backends")
        if self.share0.shape != self.share1.shape:
            raise ShapeMismatch(f"share shapes {self.share0.shape} vs {self.share1.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.share0.shape

    @property
    def backend(self) -> Backend:
        return self.share0.backend

    def shares(self) -> tuple[RingTensor, RingTensor]:
        return self.share0, self.share1


@dataclass(frozen=True)
class MaskedTensor:
    """``a`` lives on S2, ``a0``/``a1`` on S0/S1, ``alpha = x - a`` on both."""

    a: RingTensor
    a0: RingTensor
    a1: RingTensor
    alpha: RingTensor
    scale: int = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.alpha.shape

    @property
    def backend(self) -> Backend:
        return self.alpha.backend

    def unmasked(self) -> PrivateTensor:
        return PrivateTensor(self.a0 + self.alpha, self.a1, self.scale)


@dataclass(frozen=True)
class MaskMaterial:
    a: RingTensor
    a0: RingTensor
    a1: RingTensor


@dataclass(frozen=True)
class ProductMaterial:
    """Shares of ``B(a^x, a^y)`` for one bilinear node."""

    c0: RingTensor
    c1: RingTensor


@dataclass(frozen=True)
class TruncMaterial:
    """Shares of ``r`` uniform in ``[0, 2^(b+k))`` and of ``r' = floor(r / 2^f)``."""

    r0: RingTensor
    r1: RingTensor
    rp0: RingTensor
    rp1: RingTensor


class TruncMode(str, enum.Enum):
    INTERACTIVE = "interactive"
    LOCAL = "local"

    @classmethod
    def parse(cls, name: str | TruncMode) -> TruncMode:
        if isinstance(name, TruncMode):
            return name
        aliases = {"interactive": cls.INTERACTIVE, "cs10": cls.INTERACTIVE,
                   "local": cls.LOCAL, "optimistic": cls.LOCAL, "localoptimistic": cls.LOCAL}
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown truncation mode {name!r}") from None


@dataclass(frozen=True)
class TruncationConfig:
    mode: TruncMode = TruncMode.INTERACTIVE
    frac_bits: int = 16
    bound_bits: int = 32
    stat_sec: int = 30

    @classmethod
    def from_fixed(cls, cfg: FixedPointConfig, mode: TruncMode | str = TruncMode.INTERACTIVE) -> TruncationConfig:
        return cls(TruncMode.parse(mode), cfg.frac_bits, cfg.bound_bits, cfg.stat_sec)

    def check_backend(self, backend: Backend) -> None:
        if self.mode is TruncMode.LOCAL and backend is not Backend.INT64:
            raise ModeUnsupported("local optimistic truncation needs the int64 ring")


class BilinearKind(str, enum.Enum):
    MUL = "mul"
    MATMUL = "matmul"
    CONV2D = "conv2d"


def apply_bilinear(kind: BilinearKind | str, x: RingTensor, y: RingTensor,
                   geom: Conv2DGeometry | None = None) -> RingTensor:
    kind = BilinearKind(kind)
    if kind is BilinearKind.MUL:
        if x.shape != y.shape:
            raise ShapeMismatch(f"mul {x.shape} vs {y.shape}")
        return x * y
    if kind is BilinearKind.MATMUL:
        return x @ y
    return ring.ring_conv2d(x, y, geom or Conv2DGeometry())


# -- per-party kernels ------------------------------------------------------

def share_split(x: RingTensor, stream: RandomStream) -> tuple[RingTensor, RingTensor]:
    s0 = ring.sample_uniform(x.shape, x.backend, stream, x.crt)
    return s0, x - s0


def mask_diff(x_i: RingTensor, a_i: RingTensor) -> RingTensor:
    """Message S_i sends to S_{1-i} when masking."""
    return x_i - a_i


def bilinear_share(i: int, kind: BilinearKind | str, alpha_x: RingTensor, alpha_y: RingTensor,
                   ax_i: RingTensor, ay_i: RingTensor, c_i: RingTensor,
                   geom: Conv2DGeometry | None = None) -> RingTensor:
    z = (apply_bilinear(kind, alpha_x, ay_i, geom) + apply_bilinear(kind, ax_i, alpha_y, geom)) + c_i
    if i == 0:
        z = z + apply_bilinear(kind, alpha_x, alpha_y, geom)
    return z


def trunc_open_share(i: int, x_i: RingTensor, r_i: RingTensor, cfg: TruncationConfig) -> RingTensor:
    """Masked share S_i publishes: x_i + r_i, plus the 2^b offset on S0."""
    c = x_i + r_i
    if i == 0:
        c = c + RingTensor.constant(1 << cfg.bound_bits, x_i.backend, x_i.crt)
    return c


def trunc_finish(i: int, c: RingTensor, rp_i: RingTensor, cfg: TruncationConfig) -> RingTensor:
    z = -rp_i
    if i == 0:
        shift = RingTensor.constant(1 << (cfg.bound_bits - cfg.frac_bits), c.backend, c.crt)
        z = z + ring.floor_div_pow2(c, cfg.frac_bits) - shift
    return z


def trunc_local_share(i: int, x_i: RingTensor, cfg: TruncationConfig) -> RingTensor:
    cfg.check_backend(x_i.backend)
    f = cfg.frac_bits
    if i == 0:
        return ring.floor_div_pow2(x_i, f)
    return -ring.floor_div_pow2(-x_i, f)


# -- whole-view operations ---------------------------------------------------

def share(x: RingTensor, stream: RandomStream, scale: int = 0) -> PrivateTensor:
    s0, s1 = share_split(x, stream)
    return PrivateTensor(s0, s1, scale)


def reconstruct(p: PrivateTensor) -> RingTensor:
    if p.share0.shape != p.share1.shape:
        raise ShapeMismatch("share shapes differ")
    return p.share0 + p.share1


def mask(p: PrivateTensor, material: MaskMaterial | None) -> MaskedTensor:
    if material is None:
        raise MissingTriple("no mask material for this tensor")
    if material.a.shape != p.shape:
        raise ShapeMismatch(f"mask shape {material.a.shape} vs tensor {p.shape}")
    d0 = mask_diff(p.share0, material.a0)
    d1 = mask_diff(p.share1, material.a1)
    return MaskedTensor(material.a, material.a0, material.a1, d0 + d1, p.scale)


def _check_scales(p: PrivateTensor, q: PrivateTensor) -> None:
    if p.scale != q.scale:
        raise ScaleMismatch(f"scale 2^{p.scale} vs 2^{q.scale}")


def add(p: PrivateTensor, q: PrivateTensor) -> PrivateTensor:
    _check_scales(p, q)
    return PrivateTensor(p.share0 + q.share0, p.share1 + q.share1, p.scale)


def sub(p: PrivateTensor, q: PrivateTensor) -> PrivateTensor:
    _check_scales(p, q)
    return PrivateTensor(p.share0 - q.share0, p.share1 - q.share1, p.scale)


def neg(p: PrivateTensor) -> PrivateTensor:
    return PrivateTensor(-p.share0, -p.share1, p.scale)


def add_plain(p: PrivateTensor, c: RingTensor, scale: int) -> PrivateTensor:
    if scale != p.scale:
        raise ScaleMismatch(f"scale 2^{p.scale} vs public 2^{scale}")
    return PrivateTensor(p.share0 + c, p.share1, p.scale)


def mul_plain(p: PrivateTensor, c: RingTensor, scale: int) -> PrivateTensor:
    return PrivateTensor(p.share0 * c, p.share1 * c, p.scale + scale)


def bilinear(kind: BilinearKind | str, x: MaskedTensor, y: MaskedTensor,
             material: ProductMaterial | None, geom: Conv2DGeometry | None = None) -> PrivateTensor:
    if not isinstance(x, MaskedTensor) or not isinstance(y, MaskedTensor):
        raise TypeError("bilinear operations take masked tensors; mask inputs first")
    if material is None:
        raise MissingTriple("no product material for this operation")
    z0 = bilinear_share(0, kind, x.alpha, y.alpha, x.a0, y.a0, material.c0, geom)
    z1 = bilinear_share(1, kind, x.alpha, y.alpha, x.a1, y.a1, material.c1, geom)
    return PrivateTensor(z0, z1, x.scale + y.scale)


def mul(x: MaskedTensor, y: MaskedTensor, material: ProductMaterial | None) -> PrivateTensor:
    return bilinear(BilinearKind.MUL, x, y, material)


def matmul(x: MaskedTensor, y: MaskedTensor, material: ProductMaterial | None) -> PrivateTensor:
    return bilinear(BilinearKind.MATMUL, x, y, material)


def conv2d(x: MaskedTensor, y: MaskedTensor, material: ProductMaterial | None,
           geom: Conv2DGeometry = Conv2DGeometry()) -> PrivateTensor:
    return bilinear(BilinearKind.CONV2D, x, y, material, geom)


def truncate(p: PrivateTensor, cfg: TruncationConfig, material: TruncMaterial | None = None) -> PrivateTensor:
    cfg.check_backend(p.backend)
    if p.scale != 2 * cfg.frac_bits:
        raise ScaleMismatch(f"truncate expects scale 2^{2 * cfg.frac_bits}, got 2^{p.scale}")
    new_scale = p.scale - cfg.frac_bits
    if cfg.mode is TruncMode.LOCAL:
        return PrivateTensor(trunc_local_share(0, p.share0, cfg), trunc_local_share(1, p.share1, cfg), new_scale)
    if material is None:
        raise MissingTriple("interactive truncation needs offline material")
    c = trunc_open_share(0, p.share0, material.r0, cfg) + trunc_open_share(1, p.share1, material.r1, cfg)
    return PrivateTensor(trunc_finish(0, c, material.rp0, cfg), trunc_finish(1, c, material.rp1, cfg), new_scale)


# -- local structural ops -----------------------------------------------------

class LocalKind(str, enum.Enum):
    TRANSPOSE = "transpose"
    STACK = "stack"
    CONCAT = "concat"
    RESHAPE = "reshape"
    REDUCE_SUM = "reduce_sum"
    BROADCAST = "broadcast"
    WINDOW_SUM = "window_sum"
    INDEX = "index"


def apply_local(kind: LocalKind | str, tensors: Sequence[RingTensor], **params) -> RingTensor:
    kind = LocalKind(kind)
    if kind is LocalKind.STACK:
        return ring.stack(tensors, params.get("axis", 0))
    if kind is LocalKind.CONCAT:
        return ring.concat(tensors, params.get("axis", 0))
    if len(tensors) != 1:
        raise ShapeMismatch(f"{kind.value} takes one input")
    (t,) = tensors
    if kind is LocalKind.TRANSPOSE:
        return t.transpose(params.get("axes"))
    if kind is LocalKind.RESHAPE:
        return t.reshape(params["shape"])
    if kind is LocalKind.REDUCE_SUM:
        return t.sum(params["axis"])
    if kind is LocalKind.BROADCAST:
        return t.broadcast_to(params["shape"])
    if kind is LocalKind.WINDOW_SUM:
        return ring.window_sum(t, params["window"])
    return t[params["index"]]


def local_op(kind: LocalKind | str, inputs: Sequence[PrivateTensor | MaskedTensor], **params):
    """Apply a structural op to every constituent of the inputs; no messages."""
    if not inputs:
        raise ShapeMismatch("local op needs inputs")
    if all(isinstance(t, PrivateTensor) for t in inputs):
        scale = inputs[0].scale
        if any(t.scale != scale for t in inputs):
            raise ScaleMismatch("local op over mixed scales")
        return PrivateTensor(apply_local(kind, [t.share0 for t in inputs], **params),
                             apply_local(kind, [t.share1 for t in inputs], **params), scale)
    if all(isinstance(t, MaskedTensor) for t in inputs):
        scale = inputs[0].scale
        if any(t.scale != scale for t in inputs):
            raise ScaleMismatch("local op over mixed scales")
        parts = [apply_local(kind, [getattr(t, f) for t in inputs], **params) for f in ("a", "a0", "a1", "alpha")]
        return MaskedTensor(*parts, scale)
    raise TypeError("local op inputs must be all private or all masked")

"""Ring-element tensors over Z_{2^64} ("int64") and a CRT composite ("int100").

Int64 tensors store one uint64 word per element and rely on numpy's
wrapping unsigned arithmetic. Crt tensors store ``k`` residues per element
in the trailing axis (row-major, residues contiguous), each an int64 below
its modulus. Python big integers only appear in the oracle helpers
(:func:`to_ints`, :func:`from_ints`) and never in the arithmetic kernels.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackendMismatch, ConfigError, OverflowBound, ShapeMismatch
from .rng import RandomStream


class Backend(str, enum.Enum):
    INT64 = "int64"
    CRT = "int100"

    @classmethod
    def parse(cls, name: str | Backend) -> Backend:
        if isinstance(name, Backend):
            return name
        for b in cls:
            if name.lower() in (b.value, b.name.lower()):
                return b
        raise ValueError(f"unknown backend {name!r}")


# Four primes just below 2^26. Residue products fit in 52 bits, which keeps
# every kernel in int64/float64 without overflow; the product is ~2^104.
DEFAULT_CRT_MODULI = (67108859, 67108837, 67108819, 67108777)


@dataclass(frozen=True)
class CrtParams:
    moduli: tuple[int, ...] = DEFAULT_CRT_MODULI

    def __post_init__(self):
        ms = tuple(int(m) for m in self.moduli)
        object.__setattr__(self, "moduli", ms)
        if any(m < 3 or m >= 1 << 31 for m in ms):
            raise ValueError("CRT moduli must lie in [3, 2^31)")
        for i, mi in enumerate(ms):
            for mj in ms[i + 1:]:
                if math.gcd(mi, mj) != 1:
                    raise ValueError("CRT moduli must be pairwise coprime")
        if math.prod(ms) < 1 << 100:
            raise ValueError("CRT modulus product must be at least 2^100")

    @property
    def k(self) -> int:
        return len(self.moduli)

    @cached_property
    def product(self) -> int:
        return math.prod(self.moduli)

    @cached_property
    def bits(self) -> int:
        return self.product.bit_length() - 1

    @cached_property
    def m(self) -> np.ndarray:
        return np.array(self.moduli, dtype=np.int64)

    @cached_property
    def garner(self) -> list[list[int]]:
        # garner[i][j] = m_j^{-1} mod m_i for j < i
        return [[pow(mj, -1, mi) for mj in self.moduli[:i]] for i, mi in enumerate(self.moduli)]

    def inv_pow2(self, f: int) -> np.ndarray:
        return np.array([pow(2, -f, m) for m in self.moduli], dtype=np.int64)

    def residues(self, value: int) -> np.ndarray:
        return np.array([value % m for m in self.moduli], dtype=np.int64)


DEFAULT_CRT = CrtParams()


@dataclass(frozen=True)
class FixedPointConfig:
    """Fixed-point encoding parameters.

    ``frac_bits`` is the scale exponent f, ``bound_bits`` the bound b on the
    magnitude of any encoded value that will be truncated, and ``stat_sec``
    the statistical masking parameter used by interactive truncation.
    """

    frac_bits: int = 16
    bound_bits: int = 32
    stat_sec: int = 30

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    def validate(self, backend: Backend, crt: CrtParams = DEFAULT_CRT) -> FixedPointConfig:
        ring_bits = 64 if backend is Backend.INT64 else crt.bits
        if self.bound_bits + self.stat_sec + 1 > ring_bits:
            raise ConfigError(
                f"b + kappa + 1 = {self.bound_bits + self.stat_sec + 1} exceeds {ring_bits} ring bits")
        if 2 * self.frac_bits > self.bound_bits:
            raise ConfigError("need 2f <= b")
        return self

    @classmethod
    def default(cls, backend: Backend | str) -> FixedPointConfig:
        if Backend.parse(backend) is Backend.INT64:
            return cls(16, 32, 30)
        return cls(16, 60, 40)

    @classmethod
    def network(cls, backend: Backend | str) -> FixedPointConfig:
        """Preset with enough headroom for the benchmark networks."""
        if Backend.parse(backend) is Backend.INT64:
            return cls(12, 33, 30)
        return cls(16, 60, 40)


class RingTensor:
    """Immutable tensor of ring elements."""

    __slots__ = ("backend", "data", "crt")
    __hash__ = None  # type: ignore[assignment]

    def __init__(self, backend: Backend, data: np.ndarray, crt: CrtParams | None = None):
        self.backend = backend
        if backend is Backend.INT64:
            data = np.asarray(data, dtype=np.uint64)
            self.crt = None
        else:
            self.crt = crt or DEFAULT_CRT
            data = np.asarray(data, dtype=np.int64)
            if data.ndim == 0 or data.shape[-1] != self.crt.k:
                raise ShapeMismatch("Crt data needs a trailing residue axis of length k")
        if data.flags.writeable:
            data = data.copy() if data.base is not None else data
            data.flags.writeable = False
        self.data = data

    # -- construction -------------------------------------------------
    @classmethod
    def zeros(cls, shape: Sequence[int], backend: Backend, crt: CrtParams | None = None) -> RingTensor:
        if backend is Backend.INT64:
            return cls(backend, np.zeros(tuple(shape), dtype=np.uint64))
        crt = crt or DEFAULT_CRT
        return cls(backend, np.zeros((*shape, crt.k), dtype=np.int64), crt)

    @classmethod
    def constant(cls, value: int, backend: Backend, crt: CrtParams | None = None) -> RingTensor:
        """Scalar ring element for an arbitrary Python integer."""
        if backend is Backend.INT64:
            return cls(backend, np.array(value % (1 << 64), dtype=np.uint64))
        crt = crt or DEFAULT_CRT
        return cls(backend, crt.residues(value), crt)

    # -- shape --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape if self.backend is Backend.INT64 else self.data.shape[:-1]

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def modulus(self) -> int:
        return 1 << 64 if self.backend is Backend.INT64 else self.crt.product

    @property
    def words_per_element(self) -> int:
        return 1 if self.backend is Backend.INT64 else self.crt.k

    def _like(self, data: np.ndarray) -> RingTensor:
        return RingTensor(self.backend, data, self.crt)

    def structural(self, fn: Callable[[np.ndarray], np.ndarray]) -> RingTensor:
        """Apply a pure index-rearranging function to the element axes."""
        if self.backend is Backend.INT64:
            return self._like(fn(self.data))
        return self._like(np.stack([fn(self.data[..., j]) for j in range(self.crt.k)], axis=-1))

    def linear(self, fn: Callable[[np.ndarray], np.ndarray]) -> RingTensor:
        """Apply an integer-linear map (sums of elements) with reduction."""
        if self.backend is Backend.INT64:
            return self._like(fn(self.data).astype(np.uint64))
        m = self.crt.m
        return self._like(np.stack([fn(self.data[..., j]) % m[j] for j in range(self.crt.k)], axis=-1))

    def reshape(self, shape: Sequence[int]) -> RingTensor:
        shape = tuple(shape)
        try:
            np.empty(self.shape, dtype=np.bool_).reshape(shape)
        except ValueError:
            raise ShapeMismatch(f"cannot reshape {self.shape} to {shape}") from None
        return self.structural(lambda d: d.reshape(shape))

    def transpose(self, axes: Sequence[int] | None = None) -> RingTensor:
        axes = tuple(axes) if axes is not None else tuple(reversed(range(self.ndim)))
        return self.structural(lambda d: d.transpose(axes))

    def broadcast_to(self, shape: Sequence[int]) -> RingTensor:
        shape = tuple(shape)
        try:
            np.broadcast_shapes(self.shape, shape)
        except ValueError as exc:
            raise ShapeMismatch(str(exc)) from None
        return self.structural(lambda d: np.ascontiguousarray(np.broadcast_to(d, shape)))

    def sum(self, axis: int) -> RingTensor:
        return self.linear(lambda d: d.sum(axis=axis))

    def __getitem__(self, idx) -> RingTensor:
        return self.structural(lambda d: d[idx])

    # -- arithmetic sugar ---------------------------------------------
    def __add__(self, other: RingTensor) -> RingTensor:
        return ring_add(self, other)

    def __sub__(self, other: RingTensor) -> RingTensor:
        return ring_sub(self, other)

    def __neg__(self) -> RingTensor:
        return ring_neg(self)

    def __mul__(self, other: RingTensor) -> RingTensor:
        return ring_mul(self, other)

    def __matmul__(self, other: RingTensor) -> RingTensor:
        return ring_matmul(self, other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RingTensor):
            return NotImplemented
        return (self.backend is other.backend and self.crt == other.crt
                and self.shape == other.shape and bool(np.array_equal(self.data, other.data)))

    def __repr__(self) -> str:
        return f"RingTensor({self.backend.value}, shape={self.shape})"

    # -- serialization ------------------------------------------------
    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.data).astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes | memoryview, backend: Backend, shape: Sequence[int],
                   crt: CrtParams | None = None) -> RingTensor:
        words = np.frombuffer(buf, dtype="<u8")
        if backend is Backend.INT64:
            return cls(backend, words.astype(np.uint64).reshape(tuple(shape)))
        crt = crt or DEFAULT_CRT
        return cls(backend, words.astype(np.int64).reshape((*shape, crt.k)), crt)


# -- elementwise ops ------------------------------------------------------

def _check_pair(a: RingTensor, b: RingTensor) -> None:
    if a.backend is not b.backend or a.crt != b.crt:
        raise BackendMismatch(f"{a.backend.value} vs {b.backend.value}")
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")


def _crt_pair_data(a: RingTensor, b: RingTensor) -> tuple[np.ndarray, np.ndarray]:
    return a.data, b.data  # trailing residue axis broadcasts against scalars (k,)


def ring_add(a: RingTensor, b: RingTensor) -> RingTensor:
    _check_pair(a, b)
    if a.backend is Backend.INT64:
        return a._like(a.data + b.data)
    x, y = _crt_pair_data(a, b)
    return a._like((x + y) % a.crt.m)


def ring_sub(a: RingTensor, b: RingTensor) -> RingTensor:
    _check_pair(a, b)
    if a.backend is Backend.INT64:
        return a._like(a.data - b.data)
    x, y = _crt_pair_data(a, b)
    return a._like((x - y) % a.crt.m)


def ring_neg(a: RingTensor) -> RingTensor:
    if a.backend is Backend.INT64:
        return a._like(np.uint64(0) - a.data)
    return a._like((-a.data) % a.crt.m)


def ring_mul(a: RingTensor, b: RingTensor) -> RingTensor:
    """Elementwise product."""
    _check_pair(a, b)
    if a.backend is Backend.INT64:
        return a._like(a.data * b.data)
    x, y = _crt_pair_data(a, b)
    return a._like((x * y) % a.crt.m)


# -- matmul / conv ------------------------------------------------------------

_FLOAT_SPLIT = 13
_FLOAT_CHUNK = 1 << 13


def _crt_matmul_residue(x: np.ndarray, y: np.ndarray, m: int) -> np.ndarray:
    # x = hi*2^13 + lo with both halves < 2^13; every partial product is below
    # 2^39, so float64 BLAS sums of up to 2^13 terms stay exact.
    lo = (x & ((1 << _FLOAT_SPLIT) - 1)).astype(np.float64)
    hi = (x >> _FLOAT_SPLIT).astype(np.float64)
    yf = y.astype(np.float64)
    acc = np.zeros((x.shape[0], y.shape[1]), dtype=np.int64)
    for s in range(0, x.shape[1], _FLOAT_CHUNK):
        sl = slice(s, s + _FLOAT_CHUNK)
        p_hi = (hi[:, sl] @ yf[sl]).astype(np.int64) % m
        p_lo = (lo[:, sl] @ yf[sl]).astype(np.int64) % m
        acc = (acc + (p_hi << _FLOAT_SPLIT) + p_lo) % m
    return acc


def ring_matmul(a: RingTensor, b: RingTensor) -> RingTensor:
    if a.backend is not b.backend or a.crt != b.crt:
        raise BackendMismatch(f"{a.backend.value} vs {b.backend.value}")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    if a.backend is Backend.INT64:
        return a._like(np.matmul(a.data, b.data))
    m = a.crt.moduli
    out = [_crt_matmul_residue(a.data[..., j], b.data[..., j], m[j]) for j in range(a.crt.k)]
    return a._like(np.stack(out, axis=-1))


@dataclass(frozen=True)
class Conv2DGeometry:
    """NHWC input, (fh, fw, C_in, C_out) kernel, symmetric zero padding."""

    stride: int = 1
    padding: int = 0

    def output_hw(self, h: int, w: int, fh: int, fw: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - fh) // self.stride + 1
        ow = (w + 2 * self.padding - fw) // self.stride + 1
        return oh, ow

    def output_shape(self, x_shape: Sequence[int], k_shape: Sequence[int]) -> tuple[int, ...]:
        if len(x_shape) != 4 or len(k_shape) != 4 or x_shape[3] != k_shape[2]:
            raise ShapeMismatch(f"conv2d input {tuple(x_shape)} vs kernel {tuple(k_shape)}")
        oh, ow = self.output_hw(x_shape[1], x_shape[2], k_shape[0], k_shape[1])
        if oh <= 0 or ow <= 0:
            raise ShapeMismatch("conv2d kernel larger than padded input")
        return (x_shape[0], oh, ow, k_shape[3])


def im2col(x: np.ndarray, fh: int, fw: int, geom: Conv2DGeometry) -> np.ndarray:
    """Patch matrix of shape (N*OH*OW, fh*fw*C) for a plain NHWC array."""
    if geom.padding:
        p = geom.padding
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(x, (fh, fw), axis=(1, 2))  # N, OH', OW', C, fh, fw
    win = win[:, ::geom.stride, ::geom.stride]
    n, oh, ow = win.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, -1)


def ring_conv2d(x: RingTensor, k: RingTensor, geom: Conv2DGeometry = Conv2DGeometry()) -> RingTensor:
    out_shape = geom.output_shape(x.shape, k.shape)
    fh, fw = k.shape[:2]
    cols = x.structural(lambda d: im2col(d, fh, fw, geom))
    kmat = k.reshape((-1, k.shape[3]))
    return ring_matmul(cols, kmat).reshape(out_shape)


def window_sum(x: RingTensor, window: int) -> RingTensor:
    """Non-overlapping ``window x window`` sums over the H, W axes of NHWC."""
    n, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeMismatch(f"pool window {window} does not tile {h}x{w}")
    return x.linear(lambda d: d.reshape(n, h // window, window, w // window, window, c).sum(axis=(2, 4)))


def stack(ts: Sequence[RingTensor], axis: int = 0) -> RingTensor:
    _check_all(ts)
    if ts[0].backend is Backend.INT64:
        return ts[0]._like(np.stack([t.data for t in ts], axis=axis))
    ax = axis if axis >= 0 else axis - 1
    return ts[0]._like(np.stack([t.data for t in ts], axis=ax))


def concat(ts: Sequence[RingTensor], axis: int = 0) -> RingTensor:
    _check_all(ts)
    ax = axis if axis >= 0 or ts[0].backend is Backend.INT64 else axis - 1
    try:
        return ts[0]._like(np.concatenate([t.data for t in ts], axis=ax))
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def _check_all(ts: Sequence[RingTensor]) -> None:
    if not ts:
        raise ShapeMismatch("need at least one tensor")
    for t in ts[1:]:
        if t.backend is not ts[0].backend or t.crt != ts[0].crt:
            raise BackendMismatch("mixed backends")
        if t.shape != ts[0].shape:
            raise ShapeMismatch(f"{t.shape} vs {ts[0].shape}")


# -- CRT reconstruction helpers (vectorized, no big integers) ---------------

def mixed_radix(data: np.ndarray, crt: CrtParams) -> np.ndarray:
    """Garner mixed-radix digits v with x = v0 + v1*m0 + v2*m0*m1 + ..."""
    ms = crt.moduli
    digits = []
    for i, mi in enumerate(ms):
        t = data[..., i]
        for j, c in enumerate(crt.garner[i]):
            t = ((t - digits[j]) % mi) * c % mi
        digits.append(t)
    return np.stack(digits, axis=-1)


def _mixed_radix_low_bits(v: np.ndarray, crt: CrtParams) -> np.ndarray:
    """Value of a mixed-radix number mod 2^64 (wrapping uint64 Horner)."""
    acc = v[..., -1].astype(np.uint64)
    for j in range(crt.k - 2, -1, -1):
        acc = acc * np.uint64(crt.moduli[j]) + v[..., j].astype(np.uint64)
    return acc


def _mixed_radix_float(v: np.ndarray, crt: CrtParams) -> np.ndarray:
    acc = v[..., -1].astype(np.float64)
    for j in range(crt.k - 2, -1, -1):
        acc = acc * float(crt.moduli[j]) + v[..., j].astype(np.float64)
    return acc


def floor_div_pow2(t: RingTensor, f: int) -> RingTensor:
    """floor(u / 2^f) for the canonical integer u in [0, m) of each element."""
    if t.backend is Backend.INT64:
        return t._like(t.data >> np.uint64(f))
    crt = t.crt
    low = _mixed_radix_low_bits(mixed_radix(t.data, crt), crt) & np.uint64((1 << f) - 1)
    low = low.astype(np.int64)[..., None]
    return t._like(((t.data - low) % crt.m) * crt.inv_pow2(f) % crt.m)


# -- fixed point encode / decode --------------------------------------------

def encode(values, cfg: FixedPointConfig, backend: Backend | str = Backend.INT64,
           crt: CrtParams | None = None) -> RingTensor:
    backend = Backend.parse(backend)
    v = np.asarray(values, dtype=np.float64)
    limit = 2.0 ** (cfg.bound_bits - cfg.frac_bits)
    if not np.all(np.abs(v) < limit):
        raise OverflowBound(f"|value| must be below 2^{cfg.bound_bits - cfg.frac_bits}")
    scaled = np.rint(v * cfg.scale)
    if cfg.bound_bits <= 62:
        return from_ints(scaled.astype(np.int64), backend, crt)
    return from_ints(np.vectorize(int, otypes=[object])(scaled), backend, crt)


def decode(t: RingTensor, cfg: FixedPointConfig, scale_bits: int | None = None) -> np.ndarray:
    """Signed real values; elements outside the bound decode to unspecified reals."""
    f = cfg.frac_bits if scale_bits is None else scale_bits
    return signed_values(t) / float(1 << f)


def signed_values(t: RingTensor) -> np.ndarray:
    """Centered integer lift of each element as float64 (exact below 2^53)."""
    if t.backend is Backend.INT64:
        return t.data.view(np.int64).astype(np.float64)
    crt = t.crt
    pos = _mixed_radix_float(mixed_radix(t.data, crt), crt)
    neg = _mixed_radix_float(mixed_radix((-t.data) % crt.m, crt), crt)
    return np.where(pos >= crt.product / 2, -neg, pos)


def from_ints(ints, backend: Backend | str = Backend.INT64, crt: CrtParams | None = None) -> RingTensor:
    """Ring tensor from integers (int64 array or object array of Python ints)."""
    backend = Backend.parse(backend)
    arr = np.asarray(ints)
    if backend is Backend.INT64:
        if arr.dtype == object:
            arr = np.vectorize(lambda z: z % (1 << 64), otypes=[object])(arr).astype(np.uint64)
        elif arr.dtype != np.uint64:
            arr = arr.astype(np.int64).view(np.uint64)
        return RingTensor(backend, arr)
    crt = crt or DEFAULT_CRT
    if arr.dtype == object:
        res = np.stack([np.vectorize(lambda z, m=m: z % m, otypes=[object])(arr).astype(np.int64)
                        for m in crt.moduli], axis=-1) if arr.size else np.zeros((*arr.shape, crt.k), np.int64)
        return RingTensor(backend, res, crt)
    if arr.dtype == np.uint64:
        arr = arr.astype(object)
        return from_ints(arr, backend, crt)
    arr = arr.astype(np.int64)
    return RingTensor(backend, arr[..., None] % crt.m, crt)


def to_ints(t: RingTensor) -> np.ndarray:
    """Canonical representatives in [0, m) as an object array of Python ints."""
    if t.backend is Backend.INT64:
        return t.data.astype(object)
    crt = t.crt
    v = mixed_radix(t.data, crt).astype(object)
    acc = v[..., -1]
    for j in range(crt.k - 2, -1, -1):
        acc = acc * crt.moduli[j] + v[..., j]
    return np.asarray(acc, dtype=object).reshape(t.shape)


def sample_uniform(shape: Sequence[int], backend: Backend | str, stream: RandomStream,
                   crt: CrtParams | None = None) -> RingTensor:
    backend = Backend.parse(backend)
    shape = tuple(shape)
    n = math.prod(shape)
    if backend is Backend.INT64:
        return RingTensor(backend, stream.words(n).reshape(shape))
    crt = crt or DEFAULT_CRT
    res = np.stack([stream.below(n, m).astype(np.int64) for m in crt.moduli], axis=-1)
    return RingTensor(backend, res.reshape((*shape, crt.k)), crt)


def limbs_to_ring(limbs: np.ndarray, shape: Sequence[int], backend: Backend,
                  crt: CrtParams | None = None) -> RingTensor:
    """Ring tensor from non-negative integers given as 32-bit limbs (MSB first)."""
    shape = tuple(shape)
    if backend is Backend.INT64:
        acc = np.zeros(limbs.shape[0], dtype=np.uint64)
        for j in range(limbs.shape[1]):
            acc = (acc << np.uint64(32)) | limbs[:, j]
        return RingTensor(backend, acc.reshape(shape))
    crt = crt or DEFAULT_CRT
    out = []
    for m in crt.moduli:
        acc = np.zeros(limbs.shape[0], dtype=np.int64)
        shift = (1 << 32) % m
        for j in range(limbs.shape[1]):
            acc = (acc * shift + (limbs[:, j].astype(np.int64) % m)) % m
        out.append(acc)
    return RingTensor(backend, np.stack(out, axis=-1).reshape((*shape, crt.k)), crt)

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpctensor import ring
from mpctensor.errors import BackendMismatch, ConfigError, OverflowBound, ShapeMismatch
from mpctensor.ring import Backend, Conv2DGeometry, CrtParams, DEFAULT_CRT, FixedPointConfig, RingTensor
from mpctensor.rng import RandomStream

from conftest import big_conv2d, big_matmul, ints, modulus, rand_ring

big_ints = st.integers(min_value=-(1 << 120), max_value=1 << 120)


def test_crt_moduli_are_coprime_primes_above_2_100():
    ms = DEFAULT_CRT.moduli
    assert all(m < 1 << 26 for m in ms)
    for i, a in enumerate(ms):
        assert all(a % p for p in range(2, math.isqrt(a) + 1))
        for b in ms[i + 1:]:
            assert math.gcd(a, b) == 1
    assert DEFAULT_CRT.product > 1 << 100
    assert DEFAULT_CRT.bits == DEFAULT_CRT.product.bit_length() - 1


def test_crt_rejects_non_coprime_moduli():
    with pytest.raises(ValueError):
        CrtParams((15, 21))


@given(st.lists(big_ints, min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_from_to_ints_round_trip(values):
    for backend in (Backend.INT64, Backend.CRT):
        m = modulus(backend)
        t = ring.from_ints(np.array(values, dtype=object), backend)
        assert list(ring.to_ints(t)) == [v % m for v in values]


@given(st.lists(st.tuples(big_ints, big_ints), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_elementwise_ops_match_big_integer_oracle(pairs):
    xs = np.array([p[0] for p in pairs], dtype=object)
    ys = np.array([p[1] for p in pairs], dtype=object)
    for backend in (Backend.INT64, Backend.CRT):
        m = modulus(backend)
        x, y = ring.from_ints(xs, backend), ring.from_ints(ys, backend)
        assert list(ints(x + y)) == [(a + b) % m for a, b in pairs]
        assert list(ints(x - y)) == [(a - b) % m for a, b in pairs]
        assert list(ints(-x)) == [(-a) % m for a, _ in pairs]
        assert list(ints(x * y)) == [(a * b) % m for a, b in pairs]


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 7, 5), (4, 33, 2), (2, 9000, 2)])
def test_matmul_matches_oracle(backend, shape):
    r, d, c = shape
    x, y = rand_ring((r, d), backend, "mx", shape), rand_ring((d, c), backend, "my", shape)
    assert np.all(ints(x @ y) == big_matmul(ints(x), ints(y), modulus(backend)))


@pytest.mark.parametrize("geom", [Conv2DGeometry(), Conv2DGeometry(2, 0), Conv2DGeometry(1, 1)])
def test_conv2d_matches_oracle(backend, geom):
    x = rand_ring((2, 6, 6, 3), backend, "cx", geom)
    k = rand_ring((3, 3, 3, 4), backend, "ck", geom)
    out = ring.ring_conv2d(x, k, geom)
    assert out.shape == geom.output_shape(x.shape, k.shape)
    assert np.all(ints(out) == big_conv2d(ints(x), ints(k), geom, modulus(backend)))


def test_conv2d_shape_errors():
    x = RingTensor.zeros((1, 4, 4, 2), Backend.INT64)
    with pytest.raises(ShapeMismatch):
        ring.ring_conv2d(x, RingTensor.zeros((3, 3, 3, 1), Backend.INT64))
    with pytest.raises(ShapeMismatch):
        ring.ring_conv2d(x, RingTensor.zeros((5, 5, 2, 1), Backend.INT64))


def test_backend_mismatch_raises():
    a = RingTensor.zeros((2,), Backend.INT64)
    b = RingTensor.zeros((2,), Backend.CRT)
    with pytest.raises(BackendMismatch):
        a + b


def test_shape_mismatch_raises(backend):
    with pytest.raises(ShapeMismatch):
        RingTensor.zeros((2,), backend) + RingTensor.zeros((3,), backend)
    with pytest.raises(ShapeMismatch):
        RingTensor.zeros((2, 3), backend) @ RingTensor.zeros((2, 3), backend)


@given(st.lists(big_ints, min_size=1, max_size=30), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_floor_div_pow2_crt_matches_oracle(values, f):
    t = ring.from_ints(np.array(values, dtype=object), Backend.CRT)
    m = DEFAULT_CRT.product
    out = ring.floor_div_pow2(t, f)
    assert list(ints(out)) == [((v % m) >> f) for v in values]


def test_floor_div_pow2_int64():
    t = rand_ring((500,), Backend.INT64, "fd")
    assert list(ints(ring.floor_div_pow2(t, 13))) == [v >> 13 for v in ints(t)]


@given(st.lists(st.floats(-1000, 1000, allow_nan=False), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_encode_decode_within_half_ulp(values):
    for backend in (Backend.INT64, Backend.CRT):
        cfg = FixedPointConfig.default(backend)
        out = ring.decode(ring.encode(values, cfg, backend), cfg)
        assert np.all(np.abs(out - np.array(values)) <= 0.5 / cfg.scale + 1e-12)


def test_encode_overflow_bound():
    cfg = FixedPointConfig(16, 32, 30)
    with pytest.raises(OverflowBound):
        ring.encode([2.0 ** 16], cfg)
    ring.encode([2.0 ** 16 - 1], cfg)


def test_fixed_point_config_validation():
    with pytest.raises(ConfigError):
        FixedPointConfig(16, 40, 30).validate(Backend.INT64)
    with pytest.raises(ConfigError):
        FixedPointConfig(40, 32, 30).validate(Backend.INT64)
    FixedPointConfig.default(Backend.INT64).validate(Backend.INT64)
    FixedPointConfig.default(Backend.CRT).validate(Backend.CRT)
    FixedPointConfig.network(Backend.INT64).validate(Backend.INT64)


def test_bytes_round_trip(backend):
    t = rand_ring((3, 4), backend, "bytes")
    back = RingTensor.from_bytes(t.to_bytes(), backend, t.shape)
    assert back == t
    assert len(t.to_bytes()) == t.size * t.words_per_element * 8


def test_structural_ops(backend):
    t = rand_ring((2, 3, 4), backend, "struct")
    raw = ints(t)
    assert np.all(ints(t.transpose((2, 0, 1))) == raw.transpose(2, 0, 1))
    assert np.all(ints(t.reshape((6, 4))) == raw.reshape(6, 4))
    assert np.all(ints(t[1]) == raw[1])
    m = modulus(backend)
    assert np.all(ints(t.sum(1)) == np.vectorize(lambda v: v % m, otypes=[object])(raw.sum(axis=1)))
    b = rand_ring((4,), backend, "bcast").broadcast_to((2, 4))
    assert b.shape == (2, 4) and np.all(ints(b)[0] == ints(b)[1])
    s = ring.stack([t, t], 0)
    assert s.shape == (2, 2, 3, 4)
    assert ring.concat([t, t], 1).shape == (2, 6, 4)


def test_window_sum(backend):
    x = rand_ring((1, 4, 4, 2), backend, "win")
    raw = ints(x)
    m = modulus(backend)
    expect = raw.reshape(1, 2, 2, 2, 2, 2).sum(axis=(2, 4))
    assert np.all(ints(ring.window_sum(x, 2)) == np.vectorize(lambda v: v % m, otypes=[object])(expect))
    with pytest.raises(ShapeMismatch):
        ring.window_sum(x, 3)


def test_ring_tensors_are_immutable(backend):
    t = rand_ring((3,), backend, "ro")
    with pytest.raises(ValueError):
        t.data[0] = 1


def test_signed_values_centered(backend):
    t = ring.from_ints(np.array([-5, 0, 7, -(1 << 40)], dtype=object), backend)
    assert list(ring.signed_values(t)) == [-5.0, 0.0, 7.0, -float(1 << 40)]


def test_sample_uniform_is_deterministic_and_in_range(backend):
    a = ring.sample_uniform((1000,), backend, RandomStream.derive(7, "x"))
    b = ring.sample_uniform((1000,), backend, RandomStream.derive(7, "x"))
    c = ring.sample_uniform((1000,), backend, RandomStream.derive(7, "y"))
    assert a == b and not a == c
    if backend is Backend.CRT:
        assert np.all(a.data < DEFAULT_CRT.m) and np.all(a.data >= 0)


def test_limbs_to_ring_matches_integer_value(backend):
    s = RandomStream.derive(3, "limbs")
    limbs = s.bits(50, 70)
    vals = [sum(int(l) << (32 * (limbs.shape[1] - 1 - j)) for j, l in enumerate(row)) for row in limbs]
    assert all(v < 1 << 70 for v in vals)
    t = ring.limbs_to_ring(limbs, (50,), backend)
    assert list(ints(t)) == [v % modulus(backend) for v in vals]

import itertools

import numpy as np
import pytest

from idface.errors import CapacityTooSmall, Overflow, TooManyTemplates
from idface.packing import PackedVector, PackingParams, capacity, decode, decode_many, encode
from idface.transform import split, ternarize


def test_encode_hand_example():
    params = PackingParams(p=8, m=2, slot_bits=6)
    xp, xm = encode([[1, 0, -1], [-1, 1, 0]], params)
    assert xp.digits == (1, 8, 0)
    assert xm.digits == (8, 0, 1)


def test_decode_hand_example():
    params = PackingParams(p=8, m=2, slot_bits=6)
    assert decode(1, 16, params) == [1, -2]
    assert decode(0, 0, params) == [0, 0]


def test_hand_example_scores_match_plaintext():
    params = PackingParams(p=8, m=2, slot_bits=6)
    Z = np.array([[1, 0, -1], [-1, 1, 0]])
    y = np.array([1, -1, 0])
    xp, xm = encode(Z, params)
    q = split(y)
    sp = sum(int(a) * int(b) for a, b in zip(xp.digits, q.plus)) + sum(int(a) * int(b) for a, b in zip(xm.digits, q.minus))
    sm = sum(int(a) * int(b) for a, b in zip(xp.digits, q.minus)) + sum(int(a) * int(b) for a, b in zip(xm.digits, q.plus))
    assert decode(sp, sm, params) == (Z @ y).tolist() == [1, -2]


def test_single_template_is_its_split():
    params = capacity(64, 3, 3)
    z = np.array([1, -1, 0, 1, 0])
    xp, xm = encode(z, params)
    s = split(z)
    assert list(xp.digits) == s.plus.tolist()
    assert list(xm.digits) == s.minus.tolist()


@pytest.mark.parametrize("beta,m", [(63, 341), (127, 292), (341, 227)])
def test_capacity_2048(beta, m):
    params = capacity(2048, 341, beta)
    assert params.m == m
    assert params.p == beta + 1


@pytest.mark.parametrize("beta,m", [(63, 8), (127, 7), (341, 5)])
def test_capacity_50(beta, m):
    assert capacity(50, 341, beta).m == m


def test_capacity_monotone_in_beta():
    ms = [capacity(2048, 341, b).m for b in range(1, 342)]
    assert all(a >= b for a, b in zip(ms, ms[1:]))


def test_capacity_errors():
    with pytest.raises(CapacityTooSmall):
        capacity(5, 341, 63)
    with pytest.raises(ValueError):
        capacity(64, 0, 3)
    with pytest.raises(TooManyTemplates):
        encode(np.zeros((3, 4), dtype=int), PackingParams(p=4, m=2, slot_bits=4))


def test_no_carry_exhaustive_small():
    # every ternary enrolment/query pair with d=4, alpha=beta=2, m=3
    d, k = 4, 2
    params = capacity(3 * 2, k, k)
    assert params.m == 3
    supports = [z for z in itertools.product([-1, 0, 1], repeat=d) if sum(map(abs, z)) == k]
    rng = np.random.default_rng(0)
    for q in supports:
        qs = split(np.array(q))
        for _ in range(5):
            Z = np.array([supports[i] for i in rng.integers(len(supports), size=3)])
            xp, xm = encode(Z, params)
            sp = sum(a * int(b) for a, b in zip(xp.digits, qs.plus)) + sum(a * int(b) for a, b in zip(xm.digits, qs.minus))
            sm = sum(a * int(b) for a, b in zip(xp.digits, qs.minus)) + sum(a * int(b) for a, b in zip(xm.digits, qs.plus))
            assert decode(sp, sm, params) == (Z @ np.array(q)).tolist()


def test_roundtrip_random(rng):
    params = capacity(512, 20, 7)
    for _ in range(20):
        Z = ternarize(rng.standard_normal((params.m, 32)), 20)
        y = ternarize(rng.standard_normal(32), 7)
        xp, xm = encode(Z, params)
        q = split(y)
        sp = sum(a * int(b) for a, b in zip(xp.digits, q.plus)) + sum(a * int(b) for a, b in zip(xm.digits, q.minus))
        sm = sum(a * int(b) for a, b in zip(xp.digits, q.minus)) + sum(a * int(b) for a, b in zip(xm.digits, q.plus))
        assert np.array_equal(decode_many([sp], [sm], params)[0], Z @ y)


def test_decode_overflow():
    params = PackingParams(p=8, m=2, slot_bits=6)
    with pytest.raises(Overflow):
        decode(1 << 6, 0, params)
    with pytest.raises(Overflow):
        decode(-1, 0, params)


def test_packed_vector_bytes():
    params = PackingParams(p=8, m=2, slot_bits=6)
    v = PackedVector((1, 8, 0, 63), params)
    assert PackedVector.from_bytes(v.to_bytes(), params) == v
    with pytest.raises(ValueError):
        PackedVector.from_bytes(v.to_bytes() + b"x", params)

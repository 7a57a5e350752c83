from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenvc.fec import (Unrecoverable, generator_matrix, gf_inv, gf_mat_inv, gf_mat_mul, gf_mul, rs_decode,
                         rs_encode)


def _slow_mul(a, b):
    # carry-less multiply reduced by x^8 + x^4 + x^3 + x^2 + 1
    r = 0
    while b:
        if b & 1:
            r ^= a
        a <<= 1
        if a & 0x100:
            a ^= 0x11D
        b >>= 1
    return r


def test_gf_mul_matches_shift_and_add():
    for a in range(256):
        for b in range(0, 256, 7):
            assert gf_mul(a, b) == _slow_mul(a, b)


def test_gf_inverse():
    for a in range(1, 256):
        assert gf_mul(a, gf_inv(a)) == 1
    with pytest.raises(ZeroDivisionError):
        gf_inv(0)


def test_mat_inverse():
    m = generator_matrix(5, 9)[[1, 4, 6, 7, 8]]
    assert np.array_equal(gf_mat_mul(m, gf_mat_inv(m)), np.eye(5, dtype=np.uint8))
    with pytest.raises(np.linalg.LinAlgError):
        gf_mat_inv(np.zeros((2, 2), dtype=np.uint8))


def test_generator_is_systematic():
    g = generator_matrix(4, 6)
    assert np.array_equal(g[:4], np.eye(4, dtype=np.uint8))


def _shards(rng, k, size=33):
    return [rng.integers(0, 256, size=size, dtype=np.uint8).tobytes() for _ in range(k)]


def test_repetition_code(rng):
    data = _shards(rng, 1)
    assert rs_encode(data, 1) == data


def test_no_parity(rng):
    assert rs_encode(_shards(rng, 5), 0) == []


@pytest.mark.parametrize("k,p", [(4, 2), (6, 3), (1, 3), (5, 1)])
def test_exhaustive_erasures(k, p, rng):
    data = _shards(rng, k)
    coded = data + rs_encode(data, p)
    for r in range(k + p + 1):
        for keep in combinations(range(k + p), r):
            got = {i: coded[i] for i in keep}
            if r >= k:
                assert rs_decode(got, k, 33) == data
            else:
                with pytest.raises(Unrecoverable):
                    rs_decode(got, k, 33)


@given(st.integers(1, 20), st.integers(0, 10), st.integers(1, 64), st.data())
def test_roundtrip_property(k, p, size, data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    shards = _shards(rng, k, size)
    coded = shards + rs_encode(shards, p)
    lost = data.draw(st.sets(st.integers(0, k + p - 1), max_size=p))
    got = {i: coded[i] for i in range(k + p) if i not in lost}
    assert rs_decode(got, k, size) == shards


def test_encode_errors(rng):
    with pytest.raises(ValueError):
        rs_encode(_shards(rng, 200), 56)
    with pytest.raises(ValueError):
        rs_encode([b"ab", b"abc"], 1)


def test_decode_length_mismatch(rng):
    data = _shards(rng, 2)
    with pytest.raises(ValueError):
        rs_decode({0: data[0], 1: data[1][:-1]}, 2, 33)

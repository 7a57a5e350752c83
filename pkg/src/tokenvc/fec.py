"""Systematic Reed-Solomon erasure code over GF(256), polynomial 0x11D.

The generator is ``V @ inv(V[:k])`` for the ``(k+p) x k`` Vandermonde matrix
on evaluation points ``0..k+p-1``: identity on the data rows, and any ``k``
rows invertible, so the code is MDS.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import kernels
from .kernels import GF_EXP, GF_LOG


class Unrecoverable(ValueError):
    """Fewer than ``k`` shards arrived."""


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(GF_EXP[GF_LOG[a] + GF_LOG[b]])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("0 has no inverse in GF(256)")
    return int(GF_EXP[255 - GF_LOG[a]])


def gf_pow(a: int, e: int) -> int:
    if e == 0:
        return 1
    if a == 0:
        return 0
    return int(GF_EXP[(GF_LOG[a] * e) % 255])


def gf_mat_inv(mat: np.ndarray) -> np.ndarray:
    """Gauss-Jordan inverse of a square GF(256) matrix."""
    n = mat.shape[0]
    a = [[int(v) for v in row] for row in mat]
    inv = [[int(i == j) for j in range(n)] for i in range(n)]
    for col in range(n):
        piv = next((r for r in range(col, n) if a[r][col]), None)
        if piv is None:
            raise np.linalg.LinAlgError("singular matrix over GF(256)")
        a[col], a[piv] = a[piv], a[col]
        inv[col], inv[piv] = inv[piv], inv[col]
        scale = gf_inv(a[col][col])
        a[col] = [gf_mul(v, scale) for v in a[col]]
        inv[col] = [gf_mul(v, scale) for v in inv[col]]
        for r in range(n):
            f = a[r][col]
            if r != col and f:
                a[r] = [x ^ gf_mul(f, y) for x, y in zip(a[r], a[col])]
                inv[r] = [x ^ gf_mul(f, y) for x, y in zip(inv[r], inv[col])]
    return np.array(inv, dtype=np.uint8)


def gf_mat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return kernels.gf_matmul(np.ascontiguousarray(a, dtype=np.uint8), np.ascontiguousarray(b, dtype=np.uint8))


@lru_cache(maxsize=256)
def generator_matrix(k: int, n: int) -> np.ndarray:
    if k < 1 or n < k or n > 255:
        raise ValueError(f"need 1 <= k <= n <= 255, got k={k}, n={n}")
    vander = np.array([[gf_pow(i, j) for j in range(k)] for i in range(n)], dtype=np.uint8)
    gen = gf_mat_mul(vander, gf_mat_inv(vander[:k]))
    gen.setflags(write=False)
    return gen


def _stack(shards) -> np.ndarray:
    rows = [np.frombuffer(bytes(s), dtype=np.uint8) for s in shards]
    if len({r.shape[0] for r in rows}) > 1:
        raise ValueError("shards must have equal length")
    return np.stack(rows)


def rs_encode(data_shards, parity: int) -> list[bytes]:
    """Parity shards for ``k`` equal-length data shards."""
    k = len(data_shards)
    if k + parity > 255:
        raise ValueError(f"k + p = {k + parity} exceeds 255")
    if parity == 0:
        if k:
            _stack(data_shards)
        return []
    data = _stack(data_shards)
    rows = generator_matrix(k, k + parity)[k:]
    return [r.tobytes() for r in gf_mat_mul(rows, data)]


def rs_decode(received: dict, k: int, shard_len: int) -> list[bytes]:
    """Recover the ``k`` data shards from any ``k`` of the coded shards.

    ``received`` maps shard index (data first, then parity) to its bytes.
    """
    for idx, s in received.items():
        if len(s) != shard_len:
            raise ValueError(f"shard {idx} has {len(s)} bytes, expected {shard_len}")
    if all(i in received for i in range(k)):
        return [bytes(received[i]) for i in range(k)]
    if len(received) < k:
        raise Unrecoverable(f"{len(received)} of {k} shards received")
    use = sorted(received)[:k]
    n = max(max(use) + 1, k)
    gen = generator_matrix(k, n)
    sub = gen[use]
    coded = _stack([received[i] for i in use])
    return [r.tobytes() for r in gf_mat_mul(gf_mat_inv(sub), coded)]

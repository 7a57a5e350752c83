"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``TOKENVC_DISABLE_NUMBA=1`` to force the numpy implementations (useful
for debugging and for platforms without numba). Both paths produce
bit-identical results; ``tests/test_kernels.py`` checks that.

Each kernel ``foo`` is bound at import time to either ``_foo_numba`` or
``_foo_numpy``; both variants stay importable so tests and the benchmark can
compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

_DISABLED = os.environ.get("TOKENVC_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = numba is not None and not _DISABLED

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(fn):
        return fn

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1
INV_2_53 = 1.0 / (1 << 53)

_U_GOLDEN = np.uint64(GOLDEN)
_U_MIX1 = np.uint64(MIX1)
_U_MIX2 = np.uint64(MIX2)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)


# ---------------------------------------------------------------------------
# SplitMix64 stream
# ---------------------------------------------------------------------------

@njit
def _splitmix_step(state):
    state = state + _U_GOLDEN
    z = state
    z = (z ^ (z >> _U30)) * _U_MIX1
    z = (z ^ (z >> _U27)) * _U_MIX2
    return z ^ (z >> _U31), state


@njit
def _splitmix_stream_numba(state, n):
    out = np.empty(n, dtype=np.uint64)
    s = np.uint64(state)
    for i in range(n):
        v, s = _splitmix_step(s)
        out[i] = v
    return out, s


def _splitmix_stream_numpy(state, n):
    # SplitMix64 is counter based: the i-th state is seed + (i+1)*GOLDEN.
    with np.errstate(over="ignore"):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(state) + steps * _U_GOLDEN
        z = states.copy()
        z = (z ^ (z >> _U30)) * _U_MIX1
        z = (z ^ (z >> _U27)) * _U_MIX2
        z = z ^ (z >> _U31)
    final = np.uint64((int(state) + n * GOLDEN) & MASK64)
    return z, final


# ---------------------------------------------------------------------------
# Partial Fisher-Yates shuffle (self-drop sampling, k-means init)
# ---------------------------------------------------------------------------

@njit
def _partial_shuffle_numba(seed, m, d):
    slots = np.arange(m)
    s = np.uint64(seed)
    for t in range(d):
        v, s = _splitmix_step(s)
        j = t + np.int64(v % np.uint64(m - t))
        tmp = slots[t]
        slots[t] = slots[j]
        slots[j] = tmp
    return slots[:d].copy()


def _partial_shuffle_numpy(seed, m, d):
    slots = np.arange(m)
    if d == 0:
        return slots[:0].copy()
    values, _ = _splitmix_stream_numpy(seed, d)
    for t, v in enumerate(values.tolist()):
        j = t + v % (m - t)
        slots[t], slots[j] = slots[j], slots[t]
    return slots[:d].copy()


# ---------------------------------------------------------------------------
# Nearest-centroid assignment (squared L2, ties -> lowest index)
# ---------------------------------------------------------------------------

@njit
def _nearest_centroid_numba(x, centroids):
    n, c_dim = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for i in range(n):
        best = np.inf
        best_k = 0
        for c in range(k):
            acc = 0.0
            for ch in range(c_dim):
                diff = x[i, ch] - centroids[c, ch]
                acc += diff * diff
            if acc < best:
                best = acc
                best_k = c
        labels[i] = best_k
        dists[i] = best
    return labels, dists


def _nearest_centroid_numpy(x, centroids, chunk=8192):
    n, c_dim = x.shape
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    for start in range(0, n, chunk):
        xs = x[start:start + chunk]
        acc = np.zeros((xs.shape[0], centroids.shape[0]))
        # channel-sequential accumulation keeps rounding identical to the jit loop
        for ch in range(c_dim):
            diff = xs[:, ch, None] - centroids[None, :, ch]
            acc += diff * diff
        lab = np.argmin(acc, axis=1)
        labels[start:start + chunk] = lab
        dists[start:start + chunk] = acc[np.arange(xs.shape[0]), lab]
    return labels, dists


# ---------------------------------------------------------------------------
# Gilbert-Elliott trace
# ---------------------------------------------------------------------------

@njit
def _ge_trace_numba(prng_state, bad, n, p_gb, p_bg, loss_good, loss_bad):
    dropped = np.empty(n, dtype=np.bool_)
    in_bad = np.empty(n, dtype=np.bool_)
    s = np.uint64(prng_state)
    for i in range(n):
        in_bad[i] = bad
        v, s = _splitmix_step(s)
        u = np.float64(v >> _U11) * INV_2_53
        dropped[i] = u < (loss_bad if bad else loss_good)
        v, s = _splitmix_step(s)
        u = np.float64(v >> _U11) * INV_2_53
        if bad:
            if u < p_bg:
                bad = False
        else:
            if u < p_gb:
                bad = True
    return dropped, in_bad, s, bad


def _ge_trace_numpy(prng_state, bad, n, p_gb, p_bg, loss_good, loss_bad):
    values, final = _splitmix_stream_numpy(prng_state, 2 * n)
    u = (values >> _U11).astype(np.float64) * INV_2_53
    u_loss = u[0::2]
    u_move = u[1::2]
    in_bad = np.empty(n, dtype=np.bool_)
    # the Markov chain is inherently sequential; everything else is vectorised
    go_bad = (u_move < p_gb).tolist()
    go_good = (u_move < p_bg).tolist()
    state = bool(bad)
    for i in range(n):
        in_bad[i] = state
        if state:
            if go_good[i]:
                state = False
        elif go_bad[i]:
            state = True
    dropped = np.where(in_bad, u_loss < loss_bad, u_loss < loss_good)
    return dropped, in_bad, final, state


# ---------------------------------------------------------------------------
# GF(256) (polynomial 0x11D) matrix x shard product
# ---------------------------------------------------------------------------

GF_POLY = 0x11D


def _build_gf_tables():
    exp = np.zeros(512, dtype=np.int64)
    log = np.zeros(256, dtype=np.int64)
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        x <<= 1
        if x & 0x100:
            x ^= GF_POLY
    exp[255:510] = exp[0:255]
    nz = np.arange(1, 256)
    mul = np.zeros((256, 256), dtype=np.uint8)
    mul[1:, 1:] = exp[(log[nz][:, None] + log[nz][None, :])]
    return exp, log, mul


GF_EXP, GF_LOG, GF_MUL = _build_gf_tables()


@njit
def _gf_matmul_numba(matrix, shards, exp, log):
    rows, k = matrix.shape
    length = shards.shape[1]
    out = np.zeros((rows, length), dtype=np.uint8)
    for r in range(rows):
        for j in range(k):
            coef = matrix[r, j]
            if coef == 0:
                continue
            lc = log[coef]
            for t in range(length):
                b = shards[j, t]
                if b != 0:
                    out[r, t] ^= np.uint8(exp[lc + log[b]])
    return out


def _gf_matmul_numpy(matrix, shards, exp=None, log=None):
    rows, k = matrix.shape
    out = np.zeros((rows, shards.shape[1]), dtype=np.uint8)
    for r in range(rows):
        for j in range(k):
            coef = matrix[r, j]
            if coef:
                out[r] ^= GF_MUL[coef][shards[j]]
    return out


# ---------------------------------------------------------------------------
# Linear-softmax context model: scores and gradient scatter
# ---------------------------------------------------------------------------

@njit
def _context_scores_numba(symbols, weights, bias):
    m, s_dim = symbols.shape
    n = bias.shape[0]
    out = np.empty((m, n), dtype=np.float64)
    for i in range(m):
        for c in range(n):
            out[i, c] = bias[c]
        for s in range(s_dim):
            sym = symbols[i, s]
            for c in range(n):
                out[i, c] += weights[s, sym, c]
    return out


def _context_scores_numpy(symbols, weights, bias):
    out = np.repeat(bias[None, :].astype(np.float64), symbols.shape[0], axis=0)
    for s in range(symbols.shape[1]):
        out += weights[s, symbols[:, s]]
    return out


@njit
def _scatter_grad_numba(symbols, grad_scores, shape_s, shape_v):
    m, s_dim = symbols.shape
    n = grad_scores.shape[1]
    dw = np.zeros((shape_s, shape_v, n), dtype=np.float64)
    for i in range(m):
        for s in range(s_dim):
            sym = symbols[i, s]
            for c in range(n):
                dw[s, sym, c] += grad_scores[i, c]
    return dw


def _scatter_grad_numpy(symbols, grad_scores, shape_s, shape_v):
    dw = np.zeros((shape_s, shape_v, grad_scores.shape[1]), dtype=np.float64)
    for s in range(symbols.shape[1]):
        np.add.at(dw[s], symbols[:, s], grad_scores)
    return dw


if USE_NUMBA:
    splitmix_stream = _splitmix_stream_numba
    partial_shuffle = _partial_shuffle_numba
    nearest_centroid = _nearest_centroid_numba
    ge_trace = _ge_trace_numba
    context_scores = _context_scores_numba
    scatter_grad = _scatter_grad_numba

    def gf_matmul(matrix, shards):
        return _gf_matmul_numba(matrix, shards, GF_EXP, GF_LOG)
else:
    splitmix_stream = _splitmix_stream_numpy
    partial_shuffle = _partial_shuffle_numpy
    nearest_centroid = _nearest_centroid_numpy
    ge_trace = _ge_trace_numpy
    context_scores = _context_scores_numpy
    scatter_grad = _scatter_grad_numpy

    def gf_matmul(matrix, shards):
        return _gf_matmul_numpy(matrix, shards)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"

"""Time each hot kernel on its numba and numpy paths.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Numba variants are called once before timing so compilation is excluded.
Outputs of the two paths are compared before anything is timed.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from tokenvc import kernels as K


def cases(rng):
    x = rng.uniform(0, 255, (4096, 12))
    cent = rng.uniform(0, 255, (1024, 12))
    gen = rng.integers(0, 256, (16, 32), dtype=np.uint8)
    shards = rng.integers(0, 256, (32, 318), dtype=np.uint8)
    sym = rng.integers(0, 1024, (4096, 14)).astype(np.int64)
    w = rng.normal(0, 0.01, (14, 1024, 1024))
    b = np.zeros(1024)
    g = rng.normal(0, 1, (4096, 1024))
    return [
        ("splitmix_stream  n=1e6", K._splitmix_stream_numba, K._splitmix_stream_numpy,
         (np.uint64(0), 1_000_000), {}),
        ("partial_shuffle  m=1024 d=512", K._partial_shuffle_numba, K._partial_shuffle_numpy,
         (np.uint64(7), 1024, 512), {}),
        ("nearest_centroid 4096x1024", K._nearest_centroid_numba, K._nearest_centroid_numpy,
         (x, cent), {}),
        ("ge_trace         n=1e6", K._ge_trace_numba, K._ge_trace_numpy,
         (np.uint64(4), False, 1_000_000, 0.068, 0.852, 0.04, 0.5), {}),
        ("gf_matmul        16x32 @ 32x318", K._gf_matmul_numba, K._gf_matmul_numpy,
         (gen, shards, K.GF_EXP, K.GF_LOG), {}),
        ("context_scores   4096x14 -> 1024", K._context_scores_numba, K._context_scores_numpy,
         (sym, w, b), {}),
        ("scatter_grad     4096x14 x 1024", K._scatter_grad_numba, K._scatter_grad_numpy,
         (sym, g, 14, 1024), {}),
    ]


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a), np.asarray(b), rtol=1e-9, atol=1e-9)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"{'kernel':36s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, fast, slow, a, kw in cases(np.random.default_rng(0)):
        ref = fast(*a, **kw)
        if not same(ref, slow(*a, **kw)):
            raise SystemExit(f"{name}: numba and numpy outputs differ")
        t_fast = min(timeit.repeat(lambda: fast(*a, **kw), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*a, **kw), number=1, repeat=args.repeat))
        print(f"{name:36s} {t_fast * 1e3:10.2f} {t_slow * 1e3:10.2f} {t_slow / t_fast:7.1f}x")


if __name__ == "__main__":
    main()

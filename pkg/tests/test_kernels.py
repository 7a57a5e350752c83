"""The numba kernels and their numpy fallbacks must agree bit for bit."""

import numpy as np
import pytest

from tokenvc import kernels
from tokenvc.channel import GEParams, GEState, ge_transmit

numba_only = pytest.mark.skipif(kernels.numba is None, reason="numba not installed")


def test_backend_name():
    assert kernels.backend() in ("numba", "numpy")


@numba_only
@pytest.mark.parametrize("state", [0, 1, 2**63 + 5, 2**64 - 1])
def test_splitmix_paths_agree(state):
    a, fa = kernels._splitmix_stream_numba(np.uint64(state), 1000)
    b, fb = kernels._splitmix_stream_numpy(np.uint64(state), 1000)
    assert np.array_equal(a, b)
    assert int(fa) == int(fb)


@numba_only
@pytest.mark.parametrize("seed,m,d", [(0, 4, 1), (12345, 256, 128), (2**64 - 3, 1023, 1023), (9, 5, 0)])
def test_shuffle_paths_agree(seed, m, d):
    a = kernels._partial_shuffle_numba(np.uint64(seed), m, d)
    b = kernels._partial_shuffle_numpy(np.uint64(seed), m, d)
    assert np.array_equal(a[:d], b[:d])


@numba_only
def test_nearest_centroid_paths_agree(rng):
    x = rng.uniform(0, 255, size=(5000, 12))
    c = rng.uniform(0, 255, size=(37, 12))
    c[5] = c[3]  # duplicate centroid: tie must go to the lower index
    la, da = kernels._nearest_centroid_numba(x, c)
    lb, db = kernels._nearest_centroid_numpy(x, c)
    assert np.array_equal(la, lb)
    assert np.array_equal(da, db)
    assert not np.any(la == 5)


@numba_only
def test_gf_matmul_paths_agree(rng):
    m = rng.integers(0, 256, size=(7, 5), dtype=np.uint8)
    s = rng.integers(0, 256, size=(5, 300), dtype=np.uint8)
    a = kernels._gf_matmul_numba(m, s, kernels.GF_EXP, kernels.GF_LOG)
    b = kernels._gf_matmul_numpy(m, s)
    assert np.array_equal(a, b)


@numba_only
def test_context_kernels_agree(rng):
    sym = rng.integers(0, 9, size=(400, 14))
    w = rng.normal(size=(14, 9, 8))
    b = rng.normal(size=8)
    assert np.allclose(kernels._context_scores_numba(sym, w, b), kernels._context_scores_numpy(sym, w, b),
                       rtol=0, atol=1e-12)
    g = rng.normal(size=(400, 8))
    assert np.allclose(kernels._scatter_grad_numba(sym, g, 14, 9), kernels._scatter_grad_numpy(sym, g, 14, 9),
                       rtol=0, atol=1e-12)


@pytest.mark.parametrize("impl", ["numba", "numpy"])
def test_ge_trace_matches_per_packet_reference(impl):
    if impl == "numba" and kernels.numba is None:
        pytest.skip("numba not installed")
    fn = kernels._ge_trace_numba if impl == "numba" else kernels._ge_trace_numpy
    p = GEParams(loss_bad=0.5, seed=77)
    dropped, bad, final, final_bad = fn(np.uint64(p.seed), False, 3000,
                                         p.p_good_to_bad, p.p_bad_to_good, p.loss_good, p.loss_bad)
    st = GEState.initial(p)
    for i in range(3000):
        assert bool(bad[i]) == st.bad
        st, lost = ge_transmit(st, p)
        assert bool(dropped[i]) == lost
    assert int(final) == st.prng
    assert bool(final_bad) == st.bad


def test_gf_tables():
    assert kernels.GF_EXP[0] == 1
    assert kernels.GF_EXP[8] == 0x1D  # x^8 reduces by the 0x11D polynomial
    assert sorted(kernels.GF_EXP[:255].tolist()) == list(range(1, 256))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tokenvc.codec import (DESK_GEOMETRY, Codebook, GeometryMismatch, InsufficientDiversity, PatchGeometry,
                           decode, decode_pixels, encode, extract_features, fit_codebook, lloyd, render_features)
from tokenvc.frames import SynthConfig, synth_sequence
from tokenvc.harness import psnr


def test_geometry_arithmetic():
    g = PatchGeometry.for_frame(512, 512, 32, 32, 2)
    assert g.p == 16 and g.channels == 12 and g.tokens == 1024
    with pytest.raises(ValueError):
        PatchGeometry(4, 4, 6, 4)  # d must divide p
    with pytest.raises(ValueError):
        PatchGeometry.for_frame(100, 128, 16, 16, 2)


def test_uniform_frame_features():
    px = np.full((128, 128, 3), 128, dtype=np.uint8)
    f = extract_features(px, DESK_GEOMETRY)
    assert f.shape == (16, 16, 12) and np.all(f == 128)


def test_feature_layout_planes():
    g = PatchGeometry(1, 1, 2, 2)
    px = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    # d == p: features are the raw samples, R plane then G then B
    assert extract_features(px, g).ravel().tolist() == [0, 3, 6, 9, 1, 4, 7, 10, 2, 5, 8, 11]


def test_feature_pooling_mean():
    g = PatchGeometry(1, 1, 4, 1)
    px = np.zeros((4, 4, 3), dtype=np.uint8)
    px[0, 0] = (160, 16, 0)
    assert extract_features(px, g).ravel().tolist() == [10.0, 1.0, 0.0]


def test_dimension_mismatch():
    with pytest.raises(GeometryMismatch):
        extract_features(np.zeros((64, 128, 3), dtype=np.uint8), DESK_GEOMETRY)


def _brute_force(features, centroids):
    out = []
    for f in features:
        best, best_d = 0, None
        for j, c in enumerate(centroids):
            d = float(((f - c) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def test_encode_matches_brute_force(small_codebook, scene_frames):
    f = scene_frames[50]
    feats = extract_features(f, small_codebook.geometry).reshape(-1, 12)
    assert np.array_equal(encode(f, small_codebook).ravel(), _brute_force(feats, small_codebook.centroids))


def test_encode_random_frame_matches_brute_force(small_codebook, rng):
    px = rng.integers(0, 256, size=(128, 128, 3), dtype=np.uint8)
    feats = extract_features(px, small_codebook.geometry).reshape(-1, 12)
    assert np.array_equal(encode(px, small_codebook).ravel(), _brute_force(feats, small_codebook.centroids))


def test_encode_deterministic_and_temporally_independent(small_codebook, scene_frames):
    frames = scene_frames[:8]
    fwd = [encode(f, small_codebook) for f in frames]
    rev = [encode(f, small_codebook) for f in reversed(frames)]
    assert all(np.array_equal(a, b) for a, b in zip(fwd, reversed(rev)))
    assert all(t.shape == (16, 16) for t in fwd)


def _tile_codebook(rng, n=8):
    g = PatchGeometry(4, 4, 2, 2)
    cent = rng.integers(0, 256, size=(n, 12)).astype(np.float64)
    return Codebook(cent, g), g


def test_exact_centroid_hit(rng):
    cb, g = _tile_codebook(rng)
    tokens = np.full((4, 4), 7)
    px = decode_pixels(tokens, cb)
    assert np.all(encode(px, cb) == 7)


@given(st.integers(0, 2**32 - 1))
def test_lossless_fixed_point_when_d_equals_p(seed):
    rng = np.random.default_rng(seed)
    cb, g = _tile_codebook(rng)
    tokens = rng.integers(0, cb.size, size=(4, 4))
    px = decode_pixels(tokens, cb)
    assert np.array_equal(decode_pixels(encode(px, cb), cb), px)
    assert np.array_equal(encode(decode_pixels(encode(px, cb), cb), cb), encode(px, cb))


def test_all_same_token_tiles():
    g = PatchGeometry(2, 3, 4, 2)
    cent = np.linspace(0, 255, 2 * 12).reshape(2, 12)
    img = decode_pixels(np.ones((2, 3), dtype=int), Codebook(cent, g))
    tile = img[:4, :4]
    for i in range(2):
        for j in range(3):
            assert np.array_equal(img[4 * i:4 * i + 4, 4 * j:4 * j + 4], tile)


def test_bilinear_upsample_values():
    g = PatchGeometry(1, 1, 4, 2)
    feats = np.zeros((1, 1, 12))
    feats[0, 0, :4] = [0, 100, 0, 100]  # R plane: columns 0 and 100
    img = render_features(feats, g)
    # half-pixel centres: x = 0.5*2/4 - 0.5 -> clamp 0 ; 0.25 ; 0.75 ; clamp 1
    assert img[0, :, 0].tolist() == [0, 25, 75, 100]


def test_decode_range_checks(small_codebook):
    with pytest.raises(IndexError):
        decode_pixels(np.full((16, 16), 64), small_codebook)
    with pytest.raises(GeometryMismatch):
        decode_pixels(np.zeros((8, 8), dtype=int), small_codebook)
    f = decode(np.zeros((16, 16), dtype=int), small_codebook)
    assert f.pixels.shape == (128, 128, 3)


def test_two_feature_corpus_zero_mse():
    x = np.array([[10.0] * 12, [200.0] * 12] * 50)
    cent, labels, hist = lloyd(x, 2, 10, seed=3)
    assert sorted(cent[:, 0].tolist()) == [10.0, 200.0]
    assert hist[-1] == 0.0


def test_insufficient_diversity():
    x = np.array([[1.0] * 12] * 10 + [[2.0] * 12] * 10)
    with pytest.raises(InsufficientDiversity):
        lloyd(x, 3, 5, 0)
    with pytest.raises(ValueError):
        lloyd(x, 2, 0, 0)


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_lloyd_mse_monotone(seed, n):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(loc=rng.uniform(0, 255, 3), scale=rng.uniform(1, 30), size=(40, 3))
                        for _ in range(5)])
    _, _, hist = lloyd(x, n, 30, seed)
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_fit_deterministic_and_monotone(scene_frames):
    a = fit_codebook(scene_frames[:20], 32, DESK_GEOMETRY, 10, seed=5)
    b = fit_codebook(scene_frames[:20], 32, DESK_GEOMETRY, 10, seed=5)
    assert a.to_bytes() == b.to_bytes()
    assert all(y <= x for x, y in zip(a.fit_mse, a.fit_mse[1:]))
    assert 0 <= a.mode_token < 32


def test_codebook_file_roundtrip(tmp_path, small_codebook):
    path = tmp_path / "cb.tcbk"
    small_codebook.save(path)
    again = Codebook.load(path)
    assert again == small_codebook
    data = path.read_bytes()
    assert data[:4] == b"TCBK"
    assert len(data) == 4 + 18 + 64 * 12 * 4 + 4
    with pytest.raises(ValueError):
        Codebook.from_bytes(b"XCBK" + data[4:])
    with pytest.raises(ValueError):
        Codebook.from_bytes(data[:-1])


def test_codebook_validation():
    g = PatchGeometry(1, 1, 2, 2)
    with pytest.raises(ValueError):
        Codebook(np.zeros((1, 12)), g)
    with pytest.raises(ValueError):
        Codebook(np.full((2, 12), 256.0), g)
    with pytest.raises(GeometryMismatch):
        Codebook(np.zeros((2, 11)), g)
    assert Codebook(np.zeros((1024, 12)), g).bits_per_index == 10


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_codec_psnr_calibration(seed):
    # Calibrated on these scenes: 35 to 38 dB. The floor leaves margin.
    frames = synth_sequence(SynthConfig.random(seed), 120)
    cb = fit_codebook(frames[:60], 64, DESK_GEOMETRY, 25, 0)
    scores = [psnr(decode_pixels(encode(f, cb), cb), f.pixels) for f in frames[60:]]
    assert np.median(scores) >= 30.0
    assert min(scores) >= 25.0

"""Temporally independent patch codec: pooled features, k-means codebook, tokens.

Token grids are plain ``(h, w)`` integer arrays. Every frame is coded on its
own; nothing here keeps state between frames.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .bitrate import shuffled_prefix
from .frames import Frame, VideoMeta


class GeometryMismatch(ValueError):
    pass


class InsufficientDiversity(ValueError):
    pass


@dataclass(frozen=True)
class PatchGeometry:
    """``h x w`` token grid over ``p x p`` patches pooled to ``d x d`` per channel."""

    h: int
    w: int
    p: int
    d: int

    def __post_init__(self):
        if min(self.h, self.w, self.p, self.d) <= 0:
            raise ValueError(f"geometry fields must be positive: {self}")
        if self.p % self.d:
            raise ValueError(f"pooled side {self.d} must divide patch side {self.p}")

    @property
    def channels(self) -> int:
        return 3 * self.d * self.d

    @property
    def height(self) -> int:
        return self.h * self.p

    @property
    def width(self) -> int:
        return self.w * self.p

    @property
    def tokens(self) -> int:
        return self.h * self.w

    @classmethod
    def for_frame(cls, height: int, width: int, h: int, w: int, d: int) -> "PatchGeometry":
        if height % h or width % w or height // h != width // w:
            raise ValueError(f"{height}x{width} frame cannot be tiled by a {h}x{w} grid of square patches")
        return cls(h, w, height // h, d)


DESK_GEOMETRY = PatchGeometry(16, 16, 8, 2)
FULL_GEOMETRY = PatchGeometry(32, 32, 16, 2)


def _pixels(frame) -> np.ndarray:
    return frame.pixels if isinstance(frame, Frame) else np.asarray(frame)


def extract_features(frame, geometry: PatchGeometry) -> np.ndarray:
    """Average-pool each patch to ``d x d`` and flatten R, G, B planes in turn.

    Returns an ``(h, w, C)`` float64 array with values in [0, 255].
    """
    px = _pixels(frame)
    if px.shape != (geometry.height, geometry.width, 3):
        raise GeometryMismatch(f"frame {px.shape} does not match geometry {geometry}")
    g = geometry
    q = g.p // g.d
    blocks = px.reshape(g.h, g.d, q, g.w, g.d, q, 3).astype(np.int64)
    pooled = blocks.sum(axis=(2, 5)) / float(q * q)  # (h, d, w, d, 3)
    return pooled.transpose(0, 2, 4, 1, 3).reshape(g.h, g.w, g.channels)


def _upsample_matrix(d: int, p: int) -> np.ndarray:
    # half-pixel-centre bilinear weights, edge samples clamped
    mat = np.zeros((p, d))
    for x in range(p):
        src = min(max((x + 0.5) * d / p - 0.5, 0.0), d - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, d - 1)
        frac = src - i0
        mat[x, i0] += 1.0 - frac
        mat[x, i1] += frac
    return mat


def render_features(features: np.ndarray, geometry: PatchGeometry) -> np.ndarray:
    """Bilinearly upsample ``(h, w, C)`` pooled features to an RGB image."""
    g = geometry
    feats = np.asarray(features, dtype=np.float64).reshape(g.h, g.w, 3, g.d, g.d)
    up = _upsample_matrix(g.d, g.p)
    patches = np.einsum("pa,hwcab,qb->hpwqc", up, feats, up)
    img = np.floor(patches.reshape(g.height, g.width, 3) + 0.5)
    return np.clip(img, 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray
    geometry: PatchGeometry
    mode_token: int = 0
    fit_mse: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("codebook needs at least two centroids")
        if c.shape[1] != self.geometry.channels:
            raise GeometryMismatch(f"centroid width {c.shape[1]} != {self.geometry.channels} channels")
        if not np.all(np.isfinite(c)) or c.min() < 0 or c.max() > 255:
            raise ValueError("centroids must be finite and within [0, 255]")
        if self.bits_per_index > 16:
            raise ValueError("codebook too large for 16-bit indices")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def bits_per_index(self) -> int:
        return max(1, math.ceil(math.log2(self.size)))

    def __eq__(self, other):
        return (
            isinstance(other, Codebook)
            and self.geometry == other.geometry
            and self.mode_token == other.mode_token
            and np.array_equal(self.centroids, other.centroids)
        )

    # -- file format ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        g = self.geometry
        head = b"TCBK" + struct.pack("<HIIHHHH", 1, self.size, g.channels, g.h, g.w, g.p, g.d)
        body = self.centroids.astype("<f4").tobytes()
        return head + body + struct.pack("<I", self.mode_token)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Codebook":
        if data[:4] != b"TCBK":
            raise ValueError("not a codebook file (bad magic)")
        version, n, c, h, w, p, d = struct.unpack_from("<HIIHHHH", data, 4)
        if version != 1:
            raise ValueError(f"unsupported codebook version {version}")
        off = 4 + struct.calcsize("<HIIHHHH")
        need = off + 4 * n * c + 4
        if len(data) != need:
            raise ValueError(f"codebook file is {len(data)} bytes, expected {need}")
        cent = np.frombuffer(data, dtype="<f4", count=n * c, offset=off).astype(np.float64).reshape(n, c)
        (mode,) = struct.unpack_from("<I", data, off + 4 * n * c)
        return cls(cent, PatchGeometry(h, w, p, d), mode_token=mode)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_bytes(Path(path).read_bytes())


def _as_f32(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def lloyd(features: np.ndarray, n: int, max_iters: int, seed: int):
    """Plain Lloyd's k-means.

    Returns ``(centroids, labels, mse_history)`` where ``mse_history[k]`` is the
    per-component squared error after the k-th assignment step.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    x = np.ascontiguousarray(features, dtype=np.float64)
    if x.shape[0] < n:
        raise InsufficientDiversity(f"{x.shape[0]} features cannot seed {n} centroids")
    uniq = np.unique(x, axis=0)
    if uniq.shape[0] < n:
        raise InsufficientDiversity(f"only {uniq.shape[0]} distinct features for {n} centroids")
    cent = uniq[shuffled_prefix(seed, uniq.shape[0], n)].copy()
    c_dim = x.shape[1]
    labels, dists = kernels.nearest_centroid(x, cent)
    history = [float(dists.sum()) / (x.shape[0] * c_dim)]
    for _ in range(max_iters):
        counts = np.bincount(labels, minlength=n)
        sums = np.zeros_like(cent)
        np.add.at(sums, labels, x)
        filled = counts > 0
        cent = cent.copy()
        cent[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            gap = ((x - cent[labels]) ** 2).sum(axis=1)
            # stable descending order: ties go to the lowest feature index
            order = np.argsort(-gap, kind="stable")
            taken = 0
            for c in empty:
                cent[c] = x[order[taken]]
                taken += 1
        new_labels, dists = kernels.nearest_centroid(x, cent)
        history.append(float(dists.sum()) / (x.shape[0] * c_dim))
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break
    return cent, labels, history


def fit_codebook(frames, n: int, geometry: PatchGeometry, max_iters: int = 25, seed: int = 0) -> Codebook:
    """Fit an ``n``-entry codebook to the patch features of ``frames``."""
    feats = [extract_features(f, geometry).reshape(-1, geometry.channels) for f in frames]
    if not feats:
        raise InsufficientDiversity("no frames to fit")
    x = np.concatenate(feats)
    cent, _, history = lloyd(x, n, max_iters, seed)
    cent = _as_f32(np.clip(cent, 0.0, 255.0))
    labels, _ = kernels.nearest_centroid(x, cent)
    mode = int(np.argmax(np.bincount(labels, minlength=n)))
    return Codebook(cent, geometry, mode_token=mode, fit_mse=tuple(history))


def encode(frame, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid token for every patch, as an ``(h, w)`` int64 grid."""
    g = codebook.geometry
    feats = extract_features(frame, g).reshape(-1, g.channels)
    labels, _ = kernels.nearest_centroid(feats, codebook.centroids)
    return labels.reshape(g.h, g.w)


def decode_pixels(tokens: np.ndarray, codebook: Codebook) -> np.ndarray:
    g = codebook.geometry
    tok = np.asarray(tokens)
    if tok.shape != (g.h, g.w):
        raise GeometryMismatch(f"token grid {tok.shape} does not match {g.h}x{g.w}")
    if tok.min() < 0 or tok.max() >= codebook.size:
        raise IndexError(f"token index out of range [0, {codebook.size})")
    return render_features(codebook.centroids[tok], g)


def decode(tokens: np.ndarray, codebook: Codebook, meta: VideoMeta | None = None, index: int = 0) -> Frame:
    """Reconstruct an RGB frame from a complete token grid."""
    px = decode_pixels(tokens, codebook)
    if meta is None:
        meta = VideoMeta(px.shape[1], px.shape[0])
    return Frame.make(meta, px, index)

"""Frame ingestion (Y4M, raw RGB with a JSON sidecar) and synthetic scenes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import BinaryIO, Iterator

import numpy as np

Y4M_MAGIC = b"YUV4MPEG2 "
FRAME_MARKER = b"FRAME"

C444 = "C444"
C420 = "C420"
RGB24 = "RGB24"  # non-standard tag: planes hold R, G, B verbatim
COLORSPACES = (C444, C420, RGB24)


class VideoFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VideoMeta:
    width: int
    height: int
    fps_num: int = 30
    fps_den: int = 1
    colorspace: str = C444

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise VideoFormatError(f"bad frame size {self.width}x{self.height}")
        if self.fps_num <= 0 or self.fps_den <= 0:
            raise VideoFormatError(f"bad frame rate {self.fps_num}:{self.fps_den}")
        if self.colorspace not in COLORSPACES:
            raise VideoFormatError(f"unsupported colorspace {self.colorspace!r}")

    @property
    def fps(self) -> Fraction:
        return Fraction(self.fps_num, self.fps_den)

    @property
    def frame_bytes(self) -> int:
        """Bytes of plane data per frame in the Y4M/raw stream."""
        luma = self.width * self.height
        if self.colorspace == C420:
            chroma = ((self.width + 1) // 2) * ((self.height + 1) // 2)
            return luma + 2 * chroma
        return 3 * luma

    def capture_time_ms(self, index: int) -> float:
        # exact rational, rounded to the microsecond
        return float(round(Fraction(index * 1000 * self.fps_den, self.fps_num), 3))


@dataclass(frozen=True, eq=False)
class Frame:
    meta: VideoMeta
    pixels: np.ndarray  # (H, W, 3) uint8, read-only
    index: int
    capture_time: float

    @classmethod
    def make(cls, meta: VideoMeta, pixels: np.ndarray, index: int) -> "Frame":
        px = np.ascontiguousarray(pixels, dtype=np.uint8)
        if px.shape != (meta.height, meta.width, 3):
            raise VideoFormatError(f"pixel array {px.shape} does not match {meta.height}x{meta.width}x3")
        px.setflags(write=False)
        return cls(meta, px, index, meta.capture_time_ms(index))

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and self.index == other.index
            and self.meta == other.meta
            and np.array_equal(self.pixels, other.pixels)
        )


# ---------------------------------------------------------------------------
# Colour conversion (BT.601 limited range)
# ---------------------------------------------------------------------------

def _round_clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    yy = (y.astype(np.float64) - 16.0) * (255.0 / 219.0)
    cb = (u.astype(np.float64) - 128.0) * (255.0 / 224.0)
    cr = (v.astype(np.float64) - 128.0) * (255.0 / 224.0)
    r = yy + 1.402 * cr
    g = yy - 0.344136 * cb - 0.714136 * cr
    b = yy + 1.772 * cb
    return _round_clamp(np.stack([r, g, b], axis=-1))


def rgb_to_yuv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    px = rgb.astype(np.float64)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = (b - y) / 1.772
    cr = (r - y) / 1.402
    return (
        _round_clamp(16.0 + y * (219.0 / 255.0)),
        _round_clamp(128.0 + cb * (224.0 / 255.0)),
        _round_clamp(128.0 + cr * (224.0 / 255.0)),
    )


# ---------------------------------------------------------------------------
# Y4M
# ---------------------------------------------------------------------------

def parse_y4m_header(line: bytes) -> VideoMeta:
    if not line.startswith(Y4M_MAGIC):
        raise VideoFormatError("malformed magic: not a YUV4MPEG2 stream")
    params = {}
    for tok in line[len(Y4M_MAGIC):].decode("ascii").split():
        params.setdefault(tok[0], tok[1:])
    missing = [k for k in "WHF" if k not in params]
    if missing:
        raise VideoFormatError(f"missing Y4M parameter(s): {', '.join(missing)}")
    try:
        num, den = (int(v) for v in params["F"].split(":"))
        width, height = int(params["W"]), int(params["H"])
    except ValueError as exc:
        raise VideoFormatError(f"bad Y4M parameter: {exc}") from None
    tag = params.get("C", "420")
    if tag == "444":
        cs = C444
    elif tag == "RGB24":
        cs = RGB24
    elif tag in ("420", "420jpeg", "420mpeg2", "420paldv"):
        cs = C420
    else:
        raise VideoFormatError(f"unsupported colorspace tag C{tag}")
    return VideoMeta(width, height, num, den, cs)


def format_y4m_header(meta: VideoMeta) -> bytes:
    tag = {C444: "C444", C420: "C420", RGB24: "CRGB24"}[meta.colorspace]
    return f"YUV4MPEG2 W{meta.width} H{meta.height} F{meta.fps_num}:{meta.fps_den} Ip A1:1 {tag}\n".encode("ascii")


def _planes_to_rgb(meta: VideoMeta, data: bytes) -> np.ndarray:
    w, h = meta.width, meta.height
    buf = np.frombuffer(data, dtype=np.uint8)
    if meta.colorspace == RGB24:
        return buf.reshape(3, h, w).transpose(1, 2, 0).copy()
    y = buf[: w * h].reshape(h, w)
    if meta.colorspace == C444:
        u = buf[w * h: 2 * w * h].reshape(h, w)
        v = buf[2 * w * h:].reshape(h, w)
    else:
        cw, ch = (w + 1) // 2, (h + 1) // 2
        u = buf[w * h: w * h + cw * ch].reshape(ch, cw)
        v = buf[w * h + cw * ch:].reshape(ch, cw)
        u = u.repeat(2, axis=0).repeat(2, axis=1)[:h, :w]
        v = v.repeat(2, axis=0).repeat(2, axis=1)[:h, :w]
    return yuv_to_rgb(y, u, v)


def _rgb_to_planes(meta: VideoMeta, rgb: np.ndarray) -> bytes:
    if meta.colorspace == RGB24:
        return np.ascontiguousarray(rgb.transpose(2, 0, 1)).tobytes()
    y, u, v = rgb_to_yuv(rgb)
    if meta.colorspace == C420:
        u, v = u[::2, ::2], v[::2, ::2]
    return y.tobytes() + u.tobytes() + v.tobytes()


class VideoReader:
    """Sequential frame reader over a Y4M or raw-RGB byte stream."""

    def __init__(self, stream: BinaryIO, meta: VideoMeta, y4m: bool):
        self._stream = stream
        self.meta = meta
        self._y4m = y4m
        self._next = 0

    def read_frame(self) -> Frame | None:
        """Next frame, or ``None`` at end of stream."""
        if self._y4m:
            marker = self._stream.readline()
            if not marker:
                return None
            if not marker.startswith(FRAME_MARKER) or not marker.endswith(b"\n"):
                raise VideoFormatError(f"missing FRAME marker before frame {self._next}")
        size = self.meta.frame_bytes
        data = self._stream.read(size)
        if not self._y4m and not data:
            return None
        if len(data) != size:
            raise VideoFormatError(f"truncated plane data in frame {self._next}: {len(data)} of {size} bytes")
        frame = Frame.make(self.meta, _planes_to_rgb(self.meta, data), self._next)
        self._next += 1
        return frame

    def __iter__(self) -> Iterator[Frame]:
        while (frame := self.read_frame()) is not None:
            yield frame

    def close(self) -> None:
        self._stream.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class SynthReader:
    """Reader-compatible handle over a synthetic scene."""

    def __init__(self, cfg: "SynthConfig", count: int | None = None):
        self.meta = cfg.meta
        self._cfg = cfg
        self._count = count
        self._scene = _Scene(cfg)
        self._next = 0

    def read_frame(self) -> Frame | None:
        if self._count is not None and self._next >= self._count:
            return None
        frame = self._scene.render(self._next)
        self._scene.advance()
        self._next += 1
        return frame

    def __iter__(self) -> Iterator[Frame]:
        while (frame := self.read_frame()) is not None:
            yield frame

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def open_video(source, count: int | None = None):
    """Open a Y4M file, a raw RGB file with a ``<path>.json`` sidecar, or a
    :class:`SynthConfig`. Returns ``(meta, reader)``."""
    if isinstance(source, SynthConfig):
        reader = SynthReader(source, count)
        return reader.meta, reader
    path = Path(source)
    fh = path.open("rb")
    head = fh.read(len(Y4M_MAGIC))
    if head == Y4M_MAGIC:
        fh.seek(0)
        line = fh.readline()
        if not line.endswith(b"\n"):
            fh.close()
            raise VideoFormatError("unterminated Y4M header")
        try:
            meta = parse_y4m_header(line.rstrip(b"\n"))
        except VideoFormatError:
            fh.close()
            raise
        return meta, VideoReader(fh, meta, y4m=True)
    side = sidecar_path(path)
    if not side.exists():
        fh.close()
        raise VideoFormatError(f"malformed magic in {path} and no raw-RGB sidecar {side.name}")
    rec = json.loads(side.read_text())
    try:
        meta = VideoMeta(int(rec["width"]), int(rec["height"]), int(rec.get("fps_num", 30)),
                         int(rec.get("fps_den", 1)), RGB24)
    except KeyError as exc:
        fh.close()
        raise VideoFormatError(f"sidecar missing field {exc}") from None
    fh.seek(0)
    return meta, VideoReader(fh, meta, y4m=False)


def read_frame(handle) -> Frame | None:
    return handle.read_frame()


def write_y4m(path, frames, meta: VideoMeta) -> None:
    with open(path, "wb") as fh:
        fh.write(format_y4m_header(meta))
        for f in frames:
            fh.write(b"FRAME\n")
            fh.write(_rgb_to_planes(meta, f.pixels))


def write_raw_rgb(path, frames, meta: VideoMeta) -> None:
    """Planar R, G, B frames plus a JSON sidecar with the geometry and rate."""
    with open(path, "wb") as fh:
        for f in frames:
            fh.write(np.ascontiguousarray(f.pixels.transpose(2, 0, 1)).tobytes())
    sidecar_path(path).write_text(json.dumps(
        {"width": meta.width, "height": meta.height, "fps_num": meta.fps_num, "fps_den": meta.fps_den},
        sort_keys=True,
    ))


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthObject:
    x: int
    y: int
    width: int
    height: int
    color: tuple[int, int, int]
    vx: int = 0
    vy: int = 0


@dataclass(frozen=True)
class SynthConfig:
    """Soft-edged rectangles bouncing over a smooth background gradient.

    ``softness`` is the width in pixels of each object's linear alpha ramp;
    0 gives hard edges.
    """

    width: int = 128
    height: int = 128
    background: tuple[int, int, int] = (40, 90, 140)
    gradient: tuple[int, int, int] = (60, 40, 30)
    objects: tuple[SynthObject, ...] = ()
    fps_num: int = 30
    fps_den: int = 1
    seed: int = 0
    softness: int = 4

    def __post_init__(self):
        if self.softness < 0:
            raise ValueError("softness must be >= 0")
        for ob in self.objects:
            if ob.width > self.width or ob.height > self.height:
                raise ValueError(f"object {ob} larger than the {self.width}x{self.height} frame")
            if ob.x < 0 or ob.y < 0 or ob.x + ob.width > self.width or ob.y + ob.height > self.height:
                raise ValueError(f"object {ob} not inside the frame")
            if abs(ob.vx) > self.width - ob.width or abs(ob.vy) > self.height - ob.height:
                raise ValueError(f"object {ob} velocity exceeds its free travel")

    @property
    def meta(self) -> VideoMeta:
        return VideoMeta(self.width, self.height, self.fps_num, self.fps_den, RGB24)

    @classmethod
    def random(cls, seed: int, width: int = 128, height: int = 128, n_objects: int = 2,
               min_size: int = 10, max_size: int = 28, max_speed: int = 2, contrast: int = 96) -> "SynthConfig":
        """Scene whose background, object sizes, colours and motion derive from ``seed``."""
        from .bitrate import SplitMix64

        rng = SplitMix64(seed)
        max_size = min(max_size, width, height)
        min_size = min(min_size, max_size)
        bg = tuple(32 + rng.below(160) for _ in range(3))
        grad = tuple(rng.below(81) - 40 for _ in range(3))
        objs = []
        for _ in range(n_objects):
            ow = min_size + rng.below(max_size - min_size + 1)
            oh = min_size + rng.below(max_size - min_size + 1)
            color = tuple(min(255, max(0, bg[c] + rng.below(2 * contrast + 1) - contrast)) for c in range(3))
            x = rng.below(width - ow + 1)
            y = rng.below(height - oh + 1)
            vx = max(-(width - ow), min(width - ow, rng.below(2 * max_speed + 1) - max_speed))
            vy = max(-(height - oh), min(height - oh, rng.below(2 * max_speed + 1) - max_speed))
            objs.append(SynthObject(x, y, ow, oh, color, vx, vy))
        return cls(width, height, bg, grad, tuple(objs), seed=seed)


def _bounce(pos: int, vel: int, size: int, limit: int) -> tuple[int, int]:
    pos += vel
    if pos < 0:
        pos, vel = -pos, -vel
    elif pos + size > limit:
        pos, vel = 2 * (limit - size) - pos, -vel
    return pos, vel


@dataclass
class _Scene:
    cfg: SynthConfig
    state: list = field(init=False)
    base: np.ndarray = field(init=False)

    def __post_init__(self):
        cfg = self.cfg
        self.state = [[o.x, o.y, o.vx, o.vy] for o in cfg.objects]
        yy = np.linspace(0.0, 1.0, cfg.height)[:, None, None]
        xx = np.linspace(0.0, 1.0, cfg.width)[None, :, None]
        ramp = 0.5 * (xx + yy) * np.asarray(cfg.gradient, dtype=np.float64)
        self.base = np.clip(np.floor(np.asarray(cfg.background, dtype=np.float64) + ramp + 0.5), 0, 255).astype(np.uint8)

    def render(self, index: int) -> Frame:
        cfg = self.cfg
        img = self.base.astype(np.float64)
        yy = np.arange(cfg.height, dtype=np.float64)[:, None]
        xx = np.arange(cfg.width, dtype=np.float64)[None, :]
        for ob, (x, y, _, _) in zip(cfg.objects, self.state):
            if cfg.softness:
                ax = np.clip(np.minimum(xx - x + 0.5, x + ob.width - 0.5 - xx) / cfg.softness + 0.5, 0.0, 1.0)
                ay = np.clip(np.minimum(yy - y + 0.5, y + ob.height - 0.5 - yy) / cfg.softness + 0.5, 0.0, 1.0)
            else:
                ax = ((xx >= x) & (xx < x + ob.width)).astype(np.float64)
                ay = ((yy >= y) & (yy < y + ob.height)).astype(np.float64)
            alpha = (ay * ax)[..., None]
            img = img * (1.0 - alpha) + alpha * np.asarray(ob.color, dtype=np.float64)
        img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
        return Frame.make(cfg.meta, img, index)

    def advance(self) -> None:
        for ob, st in zip(self.cfg.objects, self.state):
            st[0], st[2] = _bounce(st[0], st[2], ob.width, self.cfg.width)
            st[1], st[3] = _bounce(st[1], st[3], ob.height, self.cfg.height)


def synth_sequence(cfg: SynthConfig, count: int) -> list[Frame]:
    """``count`` frames of the scene described by ``cfg``; a pure function of its inputs."""
    if count < 0:
        raise ValueError("count must be >= 0")
    return list(SynthReader(cfg, count))


def with_colorspace(meta: VideoMeta, colorspace: str) -> VideoMeta:
    return replace(meta, colorspace=colorspace)

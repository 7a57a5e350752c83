"""Temporally dependent baseline: keyframe + delta codec, block RS FEC, ACKs.

Shard wire format (one per packet)::

    word  = frame:20 | shard index:6 | kind:2 | reserved:4   (big-endian u32)
    byte  k  (data shards in this frame)
    byte  p  (parity shards in this frame)
    body  mtu - 6 bytes

The frame payload is prefixed with its u32 length, zero padded to ``k``
bodies and split; shard indices ``0..k-1`` are data, ``k..k+p-1`` parity.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import PatchGeometry, extract_features, render_features
from .fec import Unrecoverable, rs_decode, rs_encode

KEY = 0
DELTA = 1
SHARD_HEADER = 6
MAX_SHARDS = 64


class MalformedPayload(ValueError):
    pass


@dataclass(frozen=True)
class DeltaCodecConfig:
    keyframe_interval: int = 30
    threshold: float = 4.0
    mtu: int = 324
    parity_ratio: float = 0.5

    def __post_init__(self):
        if self.keyframe_interval < 1:
            raise ValueError("keyframe interval must be >= 1")
        if not 0.0 <= self.parity_ratio <= 1.0:
            raise ValueError("parity ratio must be in [0, 1]")
        if self.mtu <= SHARD_HEADER:
            raise ValueError(f"MTU must exceed the {SHARD_HEADER}-byte shard header")

    @property
    def shard_body(self) -> int:
        return self.mtu - SHARD_HEADER


def quantize_features(features: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(features) + 0.5), 0, 255).astype(np.uint8)


def frame_features(frame, geometry: PatchGeometry) -> np.ndarray:
    return quantize_features(extract_features(frame, geometry))


# ---------------------------------------------------------------------------
# Delta codec
# ---------------------------------------------------------------------------

@dataclass
class EncoderState:
    reference: Optional[np.ndarray] = None
    since_key: int = 0


def delta_encode(features: np.ndarray, state: EncoderState, force_key: bool,
                 cfg: DeltaCodecConfig = DeltaCodecConfig()) -> tuple[bytes, int]:
    """Encode ``(h, w, C)`` uint8 features; updates ``state`` in place."""
    feats = np.asarray(features, dtype=np.uint8)
    h, w, c = feats.shape
    if force_key or state.reference is None or state.since_key >= cfg.keyframe_interval:
        state.reference = feats.copy()
        state.since_key = 1
        return feats.tobytes(), KEY
    flat = feats.reshape(h * w, c)
    ref = state.reference.reshape(h * w, c)
    diff = np.sqrt(((flat.astype(np.float64) - ref) ** 2).sum(axis=1))
    changed = np.flatnonzero(diff > cfg.threshold)
    if h * w > 0xFFFF:
        raise ValueError("delta positions are u16; grid too large")
    ref[changed] = flat[changed]
    state.since_key += 1
    rec = np.zeros((changed.size, 2 + c), dtype=np.uint8)
    rec[:, 0] = changed >> 8
    rec[:, 1] = changed & 0xFF
    rec[:, 2:] = flat[changed]
    return rec.tobytes(), DELTA


@dataclass
class DecoderState:
    reference: Optional[np.ndarray] = None
    chain_ok: bool = False


def delta_decode(payload: bytes, kind: int, state: DecoderState, shape: tuple[int, int, int]) -> Optional[np.ndarray]:
    """Decoded features, or ``None`` when the reference chain is broken."""
    h, w, c = shape
    if kind == KEY:
        if len(payload) != h * w * c:
            raise MalformedPayload(f"keyframe payload {len(payload)} bytes, expected {h * w * c}")
        state.reference = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
        state.chain_ok = True
        return state.reference.copy()
    if kind != DELTA:
        raise MalformedPayload(f"unknown frame kind {kind}")
    if len(payload) % (2 + c):
        raise MalformedPayload(f"delta payload {len(payload)} bytes is not a multiple of {2 + c}")
    if not state.chain_ok or state.reference is None:
        return None
    rec = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 2 + c)
    pos = (rec[:, 0].astype(np.int64) << 8) | rec[:, 1]
    if pos.size and pos.max() >= h * w:
        raise MalformedPayload("delta position outside the grid")
    ref = state.reference.reshape(h * w, c)
    ref[pos] = rec[:, 2:]
    return state.reference.copy()


def mark_lost(state: DecoderState) -> None:
    state.chain_ok = False


# ---------------------------------------------------------------------------
# Sharding
# ---------------------------------------------------------------------------

def shard_frame(payload: bytes, frame_idx: int, kind: int, cfg: DeltaCodecConfig) -> list[bytes]:
    """Split a frame payload into data + parity shard packets."""
    body = cfg.shard_body
    blob = struct.pack(">I", len(payload)) + payload
    k = max(1, math.ceil(len(blob) / body))
    p = math.ceil(cfg.parity_ratio * k)
    if k + p > MAX_SHARDS:
        raise ValueError(f"frame needs {k}+{p} shards; the 6-bit shard index allows {MAX_SHARDS}")
    blob = blob.ljust(k * body, b"\0")
    data = [blob[i * body:(i + 1) * body] for i in range(k)]
    out = []
    for idx, chunk in enumerate(data + rs_encode(data, p)):
        word = ((frame_idx & 0xFFFFF) << 12) | (idx << 6) | (kind << 4)
        out.append(struct.pack(">IBB", word, k, p) + chunk)
    return out


def parse_shard(packet: bytes) -> tuple[int, int, int, int, int, bytes]:
    """``(frame, index, kind, k, p, body)``."""
    if len(packet) < SHARD_HEADER:
        raise MalformedPayload("short shard")
    word, k, p = struct.unpack_from(">IBB", packet)
    return word >> 12, (word >> 6) & 0x3F, (word >> 4) & 0x3, k, p, packet[SHARD_HEADER:]


def unshard_frame(shards: list[bytes]) -> tuple[bytes, int]:
    """Payload and kind from the shards that arrived; raises Unrecoverable."""
    if not shards:
        raise Unrecoverable("no shards received")
    parsed = [parse_shard(s) for s in shards]
    _, _, kind, k, _, body = parsed[0]
    got = {idx: b for _, idx, _, _, _, b in parsed}
    data = b"".join(rs_decode(got, k, len(body)))
    (length,) = struct.unpack_from(">I", data)
    if length > len(data) - 4:
        raise MalformedPayload("payload length prefix exceeds shard data")
    return data[4:4 + length], kind


# ---------------------------------------------------------------------------
# Sender / receiver
# ---------------------------------------------------------------------------

@dataclass
class BaselineSender:
    """Encoder plus ACK bookkeeping; forces a keyframe on ACK timeout."""

    cfg: DeltaCodecConfig
    timeout_ms: float
    codec: EncoderState = field(default_factory=EncoderState)
    last_acked: int = -1
    outstanding: deque = field(default_factory=deque)  # (frame_idx, capture_ms), oldest first
    forced_keyframes: int = 0

    @classmethod
    def create(cls, cfg: DeltaCodecConfig, fps: float, rtt_ms: float = 100.0) -> "BaselineSender":
        return cls(cfg, rtt_ms + 2 * 1000.0 / fps)

    def on_ack(self, frame_idx: int) -> None:
        if frame_idx > self.last_acked:
            self.last_acked = frame_idx
        while self.outstanding and self.outstanding[0][0] <= self.last_acked:
            self.outstanding.popleft()

    def ack_timed_out(self, now_ms: float) -> bool:
        return bool(self.outstanding) and now_ms - self.outstanding[0][1] > self.timeout_ms

    def encode(self, features: np.ndarray, frame_idx: int, now_ms: float) -> tuple[bytes, int, bool]:
        force = self.ack_timed_out(now_ms)
        if force:
            self.outstanding.clear()
            self.forced_keyframes += 1
        payload, kind = delta_encode(features, self.codec, force, self.cfg)
        self.outstanding.append((frame_idx, now_ms))
        return payload, kind, force


@dataclass
class BaselineReceiver:
    shape: tuple[int, int, int]
    geometry: PatchGeometry
    codec: DecoderState = field(default_factory=DecoderState)
    display: Optional[np.ndarray] = None

    def receive(self, shards: list[bytes]) -> Optional[np.ndarray]:
        """Decoded features for this frame, or ``None`` (frame not rendered)."""
        try:
            payload, kind = unshard_frame(shards)
        except Unrecoverable:
            mark_lost(self.codec)
            return None
        feats = delta_decode(payload, kind, self.codec, self.shape)
        if feats is None:
            return None
        self.display = render_features(feats.astype(np.float64), self.geometry)
        return feats


@dataclass
class BaselineStep:
    frame_idx: int
    kind: int
    forced: bool
    bytes_sent: int
    payload_bytes: int
    data_bytes: int
    parity_bytes: int
    packets_sent: int
    packets_lost: int
    rendered: bool
    display: np.ndarray
    ack_sent: bool


@dataclass
class AckPath:
    """Reverse channel plus ACKs in flight (arrival time, frame index)."""

    channel: object
    pending: list = field(default_factory=list)

    def send(self, frame_idx: int, t_ms: float) -> bool:
        arrive = self.channel.transmit(8, t_ms)
        if arrive is None:
            return False
        self.pending.append((arrive, frame_idx))
        return True

    def deliver(self, sender: BaselineSender, now_ms: float) -> None:
        due = sorted(a for a in self.pending if a[0] <= now_ms)
        self.pending = [a for a in self.pending if a[0] > now_ms]
        for _, idx in due:
            sender.on_ack(idx)


def baseline_step(sender: BaselineSender, receiver: BaselineReceiver, channel, acks: AckPath, frame,
                  t_ms: float, playout_delay_ms: float) -> BaselineStep:
    """One frame period: ACK intake, encode, shard, send, decode at deadline, ACK."""
    acks.deliver(sender, t_ms)
    feats = frame_features(frame, receiver.geometry)
    payload, kind, forced = sender.encode(feats, frame.index, t_ms)
    shards = shard_frame(payload, frame.index, kind, sender.cfg)
    _, _, _, k, p, _ = parse_shard(shards[0])
    deadline = t_ms + playout_delay_ms
    arrived = []
    for s in shards:
        at = channel.transmit(len(s), t_ms, frame.index)
        if at is not None and at <= deadline:
            arrived.append(s)
    decoded = receiver.receive(arrived)
    rendered = decoded is not None
    ack_sent = acks.send(frame.index, deadline) if rendered else False
    if receiver.display is None:
        display = np.zeros_like(frame.pixels)
    else:
        display = receiver.display
    return BaselineStep(
        frame_idx=frame.index, kind=kind, forced=forced,
        bytes_sent=sum(len(s) for s in shards), payload_bytes=len(payload),
        data_bytes=k * sender.cfg.shard_body, parity_bytes=p * sender.cfg.shard_body,
        packets_sent=len(shards), packets_lost=len(shards) - len(arrived),
        rendered=rendered, display=display, ack_sent=ack_sent,
    )

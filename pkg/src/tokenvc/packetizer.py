"""Deterministic token packetization and the v1 packet wire format.

Wire format v1, one packet::

    +--------------------+------------+-------------+------------------------+
    | frame index 20 bit | pkt 2 bit  | count 10 bit| count x b-bit indices  |
    +--------------------+------------+-------------+------------------------+
      one big-endian 32-bit word                     MSB first, zero padded

``count`` is the number of tokens carried (after self-drop), not a byte
count. Total size is ``4 + ceil(count * b / 8)`` bytes.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

MISSING = -1
FRAME_MOD = 1 << 20
MAX_TOKENS = 1 << 10
MAX_PACKETS = 4


class PacketFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PacketLayout:
    pr: int = 2
    pc: int = 2

    def __post_init__(self):
        if self.pr < 1 or self.pc < 1:
            raise ValueError("layout factors must be >= 1")
        if self.packets > MAX_PACKETS:
            raise ValueError(f"wire format v1 carries at most {MAX_PACKETS} packets per frame")

    @property
    def packets(self) -> int:
        return self.pr * self.pc

    def check(self, h: int, w: int) -> None:
        if h % self.pr or w % self.pc:
            raise ValueError(f"{self.pr}x{self.pc} layout does not divide a {h}x{w} grid")

    def tokens_per_packet(self, geometry) -> int:
        self.check(geometry.h, geometry.w)
        return (geometry.h // self.pr) * (geometry.w // self.pc)

    def packet_of(self, i: int, j: int) -> int:
        return self.pc * (i % self.pr) + (j % self.pc)

    def positions(self, h: int, w: int) -> tuple[np.ndarray, ...]:
        """Per packet, the ``(i, j)`` grid positions in transmission order."""
        return _positions(self.pr, self.pc, h, w)


@lru_cache(maxsize=64)
def _positions(pr: int, pc: int, h: int, w: int) -> tuple[np.ndarray, ...]:
    PacketLayout(pr, pc).check(h, w)
    out = []
    for k in range(pr * pc):
        a, b = divmod(k, pc)
        ii, jj = np.meshgrid(np.arange(a, h, pr), np.arange(b, w, pc), indexing="ij")
        pos = np.stack([ii.ravel(), jj.ravel()], axis=1)
        pos.setflags(write=False)
        out.append(pos)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class Packet:
    frame_idx: int
    pkt_idx: int
    tokens: np.ndarray

    @property
    def token_count(self) -> int:
        return int(len(self.tokens))

    def __eq__(self, other):
        return (
            isinstance(other, Packet)
            and self.frame_idx == other.frame_idx
            and self.pkt_idx == other.pkt_idx
            and np.array_equal(self.tokens, other.tokens)
        )

    def __repr__(self):
        return f"Packet(frame_idx={self.frame_idx}, pkt_idx={self.pkt_idx}, s={self.token_count})"


def packetize(tokens: np.ndarray, frame_idx: int, layout: PacketLayout) -> list[Packet]:
    """Scatter a token grid over ``layout.packets`` packets (no self-drop)."""
    grid = np.asarray(tokens)
    h, w = grid.shape
    return [
        Packet(frame_idx % FRAME_MOD, k, grid[pos[:, 0], pos[:, 1]].astype(np.int64))
        for k, pos in enumerate(layout.positions(h, w))
    ]


def serialize_packet(packet: Packet, bits_per_index: int) -> bytes:
    s = packet.token_count
    if s >= MAX_TOKENS:
        raise PacketFormatError(f"{s} tokens do not fit the 10-bit count field")
    if not 0 <= packet.pkt_idx < MAX_PACKETS:
        raise PacketFormatError(f"packet index {packet.pkt_idx} does not fit 2 bits")
    tok = np.asarray(packet.tokens, dtype=np.int64)
    if s and (tok.min() < 0 or tok.max() >= (1 << bits_per_index)):
        raise PacketFormatError(f"token index overflows {bits_per_index} bits")
    word = ((packet.frame_idx % FRAME_MOD) << 12) | (packet.pkt_idx << 10) | s
    header = struct.pack(">I", word)
    if s == 0:
        return header
    shifts = np.arange(bits_per_index - 1, -1, -1, dtype=np.int64)
    bits = ((tok[:, None] >> shifts) & 1).astype(np.uint8)
    return header + np.packbits(bits.ravel()).tobytes()


def parse_header(data: bytes) -> tuple[int, int, int]:
    if len(data) < 4:
        raise PacketFormatError(f"short buffer: {len(data)} bytes, header needs 4")
    (word,) = struct.unpack_from(">I", data)
    return word >> 12, (word >> 10) & 0x3, word & 0x3FF


def parse_packet(data: bytes, bits_per_index: int) -> Packet:
    frame_idx, pkt_idx, s = parse_header(data)
    expected = 4 + (s * bits_per_index + 7) // 8
    if len(data) != expected:
        raise PacketFormatError(f"packet is {len(data)} bytes but header count {s} implies {expected}")
    if s == 0:
        return Packet(frame_idx, pkt_idx, np.zeros(0, dtype=np.int64))
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=4))[: s * bits_per_index]
    weights = 1 << np.arange(bits_per_index - 1, -1, -1, dtype=np.int64)
    tokens = bits.reshape(s, bits_per_index).astype(np.int64) @ weights
    return Packet(frame_idx, pkt_idx, tokens)


def depacketize(packets, layout: PacketLayout, geometry, survivors) -> np.ndarray:
    """Place received tokens on an ``(h, w)`` grid; everything else is MISSING.

    ``survivors`` maps packet index to the in-packet positions that packet's
    payload fills, in order (see :func:`recover_survivor_positions`).
    """
    h, w = geometry.h, geometry.w
    grid = np.full((h, w), MISSING, dtype=np.int64)
    positions = layout.positions(h, w)
    seen = set()
    frame = None
    for pkt in packets:
        if frame is None:
            frame = pkt.frame_idx
        elif pkt.frame_idx != frame:
            raise PacketFormatError(f"packets from frames {frame} and {pkt.frame_idx} mixed")
        if pkt.pkt_idx in seen:
            log.warning("duplicate packet %d for frame %d ignored", pkt.pkt_idx, frame)
            continue
        if pkt.pkt_idx >= layout.packets:
            raise PacketFormatError(f"packet index {pkt.pkt_idx} outside the {layout.packets}-packet layout")
        seen.add(pkt.pkt_idx)
        slots = np.asarray(survivors[pkt.pkt_idx], dtype=np.int64)
        if slots.shape[0] != pkt.token_count:
            raise PacketFormatError(
                f"packet {pkt.pkt_idx} carries {pkt.token_count} tokens but {slots.shape[0]} survivor slots given"
            )
        pos = positions[pkt.pkt_idx][slots]
        grid[pos[:, 0], pos[:, 1]] = pkt.tokens
    return grid

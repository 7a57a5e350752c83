"""Seeded self-dropping and the repo-wide SplitMix64 PRNG.

The transmitter thins every packet of a frame by the same number of tokens.
Which in-packet positions go is a pure function of
``(4 * frame_idx + pkt_idx, m, d)``, so the receiver rebuilds the survivor set
from the header alone: it learns ``s`` from the size field and replays the
shuffle with ``d = m - s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels
from .kernels import GOLDEN, INV_2_53, MASK64, MIX1, MIX2

MAX_DROP_RATIO = Fraction(1, 2)
HEADER_BYTES = 4


class TargetUnreachable(ValueError):
    """The requested bitrate needs more than 50% self-drop."""


class MalformedPacket(ValueError):
    pass


# ---------------------------------------------------------------------------
# PRNG
# ---------------------------------------------------------------------------

def prng_next(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(value, new_state)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31), state


class SplitMix64:
    """Stateful convenience wrapper around :func:`prng_next`."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        value, self.state = prng_next(self.state)
        return value

    def uniform(self) -> float:
        """Uniform float in [0, 1) built from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * INV_2_53

    def below(self, n: int) -> int:
        return self.next_u64() % n

    def normal(self) -> float:
        # Box-Muller; 1 - u keeps the log argument in (0, 1]
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def u64_array(self, n: int) -> np.ndarray:
        values, final = kernels.splitmix_stream(np.uint64(self.state), n)
        self.state = int(final)
        return values

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * INV_2_53


def shuffled_prefix(seed: int, m: int, d: int) -> np.ndarray:
    """First ``d`` slots of a partial Fisher-Yates shuffle of ``range(m)``."""
    if d < 0 or d > m:
        raise ValueError(f"need 0 <= d <= m, got d={d}, m={m}")
    return np.asarray(kernels.partial_shuffle(np.uint64(seed & MASK64), m, d), dtype=np.int64)


# ---------------------------------------------------------------------------
# Bit accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropPlan:
    frame_idx: int
    drop_count: int
    dropped: tuple[tuple[int, ...], ...]


def packet_bytes(tokens: int, bits_per_index: int) -> int:
    return HEADER_BYTES + (tokens * bits_per_index + 7) // 8


def frame_bitrate(packets: int, tokens_per_packet: int, bits_per_index: int, fps) -> Fraction:
    """Bits per second when every packet carries ``tokens_per_packet`` tokens."""
    return Fraction(packets * packet_bytes(tokens_per_packet, bits_per_index) * 8) * Fraction(fps)


def drop_ratio_for_target(target_bps, layout, geometry, bits_per_index: int, fps=30) -> tuple[Fraction, int]:
    """Smallest per-packet drop count ``d`` whose bitrate fits under ``target_bps``.

    Returns ``(d / m, d)``. Raises :class:`TargetUnreachable` if that needs
    dropping more than half of each packet.
    """
    if target_bps <= 0:
        raise ValueError("target bitrate must be positive")
    P = layout.packets
    m = layout.tokens_per_packet(geometry)
    target = Fraction(target_bps)
    for d in range(m + 1):
        if frame_bitrate(P, m - d, bits_per_index, fps) <= target:
            break
    else:  # pragma: no cover - d = m always fits (header-only packets) unless target < header rate
        d = m + 1
    if d > m or Fraction(d, m) > MAX_DROP_RATIO:
        floor = frame_bitrate(P, m - m // 2, bits_per_index, fps)
        raise TargetUnreachable(
            f"target {float(target)} bps is below the 50% self-drop floor of {float(floor)} bps"
        )
    return Fraction(d, m), d


# ---------------------------------------------------------------------------
# Self-drop selection
# ---------------------------------------------------------------------------

def drop_seed(frame_idx: int, pkt_idx: int) -> int:
    return (4 * frame_idx + pkt_idx) & MASK64


def select_drops(frame_idx: int, pkt_idx: int, m: int, d: int) -> tuple[int, ...]:
    """Sorted in-packet positions removed by the bitrate controller."""
    if not 0 <= m <= 1023:
        raise ValueError(f"tokens per packet must be in [0, 1023], got {m}")
    if d > m or d < 0:
        raise ValueError(f"cannot drop {d} of {m} tokens")
    return tuple(sorted(shuffled_prefix(drop_seed(frame_idx, pkt_idx), m, d).tolist()))


def recover_survivor_positions(frame_idx: int, pkt_idx: int, m: int, s: int) -> tuple[int, ...]:
    """Receiver side: positions that survived self-drop given ``s`` received tokens."""
    if s > m or s < 0:
        raise MalformedPacket(f"packet claims {s} tokens but at most {m} are expected")
    dropped = set(select_drops(frame_idx, pkt_idx, m, m - s))
    return tuple(p for p in range(m) if p not in dropped)


def plan_frame(frame_idx: int, packets: int, m: int, d: int) -> DropPlan:
    return DropPlan(
        frame_idx=frame_idx,
        drop_count=d,
        dropped=tuple(select_drops(frame_idx, k, m, d) for k in range(packets)),
    )


def apply_self_drop(packet, drop_set):
    """Return ``packet`` with the tokens at ``drop_set`` removed, order kept."""
    from .packetizer import Packet

    tokens = np.asarray(packet.tokens)
    m = tokens.shape[0]
    drops = set(int(p) for p in drop_set)
    for p in drops:
        if not 0 <= p < m:
            raise ValueError(f"drop position {p} outside packet of {m} tokens")
    if not drops:
        return packet
    keep = np.array([p not in drops for p in range(m)], dtype=bool)
    return Packet(packet.frame_idx, packet.pkt_idx, tokens[keep])

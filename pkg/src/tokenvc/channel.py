"""Packet channels: Gilbert-Elliott loss, a tail-drop FIFO link, fixed delay.

All randomness comes from SplitMix64 so a channel's drop trace is a pure
function of its config and the send schedule.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .bitrate import prng_next
from .kernels import INV_2_53

PROPAGATION_MS = 50.0
LOSS_LEVELS = {"low": 0.25, "med": 0.5, "high": 0.75}


@dataclass(frozen=True)
class GEParams:
    p_good_to_bad: float = 0.068
    p_bad_to_good: float = 0.852
    loss_good: float = 0.04
    loss_bad: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("p_good_to_bad", "p_bad_to_good", "loss_good", "loss_bad"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} is not a probability")

    @classmethod
    def level(cls, name: str, seed: int = 0) -> "GEParams":
        return cls(loss_bad=LOSS_LEVELS[name], seed=seed)

    @property
    def stationary_bad(self) -> float:
        return self.p_good_to_bad / (self.p_good_to_bad + self.p_bad_to_good)

    @property
    def mean_loss(self) -> float:
        pb = self.stationary_bad
        return (1 - pb) * self.loss_good + pb * self.loss_bad


@dataclass(frozen=True)
class GEState:
    bad: bool = False
    prng: int = 0

    @classmethod
    def initial(cls, params: GEParams) -> "GEState":
        return cls(False, params.seed)


def _uniform(state: int) -> tuple[float, int]:
    v, state = prng_next(state)
    return (v >> 11) * INV_2_53, state


def ge_transmit(state: GEState, params: GEParams) -> tuple[GEState, bool]:
    """Decide one packet's fate, then step the Markov chain."""
    u, prng = _uniform(state.prng)
    dropped = u < (params.loss_bad if state.bad else params.loss_good)
    u, prng = _uniform(prng)
    if state.bad:
        bad = not (u < params.p_bad_to_good)
    else:
        bad = u < params.p_good_to_bad
    return GEState(bad, prng), dropped


class GEChannel:
    def __init__(self, params: GEParams):
        self.params = params
        self.state = GEState.initial(params)

    def transmit(self) -> bool:
        """True if the next packet is dropped."""
        self.state, dropped = ge_transmit(self.state, self.params)
        return dropped

    def trace(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Fates of the next ``n`` packets in bulk: ``(dropped, was_bad)``."""
        p = self.params
        dropped, bad, prng, final_bad = kernels.ge_trace(
            np.uint64(self.state.prng), bool(self.state.bad), n,
            p.p_good_to_bad, p.p_bad_to_good, p.loss_good, p.loss_bad,
        )
        self.state = GEState(bool(final_bad), int(prng))
        return np.asarray(dropped), np.asarray(bad)


@dataclass
class FifoLink:
    """Tail-drop FIFO draining at ``rate_bps``; capacity in bytes."""

    rate_bps: float = 320_000
    capacity_bytes: Optional[float] = None
    propagation_ms: float = PROPAGATION_MS
    busy_until: float = 0.0
    _last_send: float = field(default=float("-inf"), repr=False)

    def __post_init__(self):
        if self.rate_bps <= 0:
            raise ValueError("link rate must be positive")
        if self.capacity_bytes is None:
            # queue sized to 150 ms of drain time
            self.capacity_bytes = 0.15 * self.rate_bps / 8

    def backlog_bytes(self, t_ms: float) -> float:
        return max(0.0, self.busy_until - t_ms) * self.rate_bps / 8000.0

    def transmit(self, size_bytes: int, t_send_ms: float) -> Optional[float]:
        """Delivery time in ms, or ``None`` if the queue had no room."""
        if t_send_ms < self._last_send:
            raise ValueError("sends must be issued in non-decreasing time order")
        self._last_send = t_send_ms
        if size_bytes + self.backlog_bytes(t_send_ms) > self.capacity_bytes:
            return None
        self.busy_until = max(t_send_ms, self.busy_until) + size_bytes * 8000.0 / self.rate_bps
        return self.busy_until + self.propagation_ms


def link_transmit(link: FifoLink, size_bytes: int, t_send_ms: float) -> Optional[float]:
    return link.transmit(size_bytes, t_send_ms)


@dataclass(frozen=True)
class ChannelConfig:
    """Exactly one of three modes.

    ``ge``: Gilbert-Elliott loss plus fixed propagation delay.
    ``fifo``: rate-limited tail-drop link (its own propagation delay).
    ``trace``: fixed delay, every packet of the frames in ``drop_frames`` lost.
    """

    mode: str = "ge"
    ge: GEParams = GEParams(loss_good=0.0, loss_bad=0.0)
    rate_bps: float = 320_000
    capacity_bytes: Optional[float] = None
    propagation_ms: float = PROPAGATION_MS
    drop_frames: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode not in ("ge", "fifo", "trace"):
            raise ValueError(f"unknown channel mode {self.mode!r}")

    @classmethod
    def lossless(cls) -> "ChannelConfig":
        return cls("trace")

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        d = dict(d)
        if "ge" in d and isinstance(d["ge"], dict):
            d["ge"] = GEParams(**d["ge"])
        if "drop_frames" in d:
            d["drop_frames"] = tuple(d["drop_frames"])
        return cls(**d)


@dataclass
class TraceRow:
    seq: int
    t_send_ms: float
    dropped: bool
    deliver_ms: Optional[float]


class Channel:
    """Stateful channel instance owned by one session."""

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self._ge = GEChannel(cfg.ge) if cfg.mode == "ge" else None
        self._link = (
            FifoLink(cfg.rate_bps, cfg.capacity_bytes, cfg.propagation_ms) if cfg.mode == "fifo" else None
        )
        self._drop = frozenset(cfg.drop_frames)
        self.rows: list[TraceRow] = []

    @property
    def link(self) -> Optional[FifoLink]:
        return self._link

    def transmit(self, size_bytes: int, t_send_ms: float, frame_idx: Optional[int] = None) -> Optional[float]:
        cfg = self.cfg
        if cfg.mode == "ge":
            deliver = None if self._ge.transmit() else t_send_ms + cfg.propagation_ms
        elif cfg.mode == "fifo":
            deliver = self._link.transmit(size_bytes, t_send_ms)
        else:
            deliver = None if frame_idx in self._drop else t_send_ms + cfg.propagation_ms
        self.rows.append(TraceRow(len(self.rows), t_send_ms, deliver is None, deliver))
        return deliver

    def export_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["packet_seq", "t_send_ms", "verdict", "deliver_ms"])
            for r in self.rows:
                out.writerow([
                    r.seq, f"{r.t_send_ms:.3f}", "dropped" if r.dropped else "delivered",
                    "" if r.deliver_ms is None else f"{r.deliver_ms:.3f}",
                ])


def channel_transmit(channel: Channel, size_bytes: int, t_send_ms: float, frame_idx: Optional[int] = None):
    return channel.transmit(size_bytes, t_send_ms, frame_idx)


def reverse_channel(loss: float = 0.0, seed: int = 0, propagation_ms: float = PROPAGATION_MS) -> Channel:
    """ACK path: fixed delay, i.i.d. loss with probability ``loss``."""
    return Channel(ChannelConfig("ge", GEParams(0.0, 1.0, loss, loss, seed), propagation_ms=propagation_ms))


__all__ = [
    "GEParams", "GEState", "ge_transmit", "GEChannel", "FifoLink", "link_transmit",
    "ChannelConfig", "Channel", "channel_transmit", "reverse_channel", "LOSS_LEVELS",
]

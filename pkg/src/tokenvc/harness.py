"""Session runner, metrics and report files.

A session walks the source frame by frame. Frame ``k`` is captured at
``k / fps`` and must be shown at ``capture + playout_delay_ms``; packets that
arrive later count as lost. Everything is deterministic given the config.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .baseline import (KEY, AckPath, BaselineReceiver, BaselineSender, DeltaCodecConfig, baseline_step)
from .bitrate import (apply_self_drop, drop_ratio_for_target, recover_survivor_positions, select_drops)
from .channel import Channel, ChannelConfig, GEParams, LOSS_LEVELS, reverse_channel
from .codec import Codebook, PatchGeometry, decode_pixels, encode, fit_codebook
from .frames import Frame, SynthConfig, open_video
from .packetizer import PacketLayout, depacketize, packetize, parse_packet, serialize_packet
from .recovery import ContextModel, RecoveryContext, recover

PSNR_CAP = 99.0


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def psnr(a, b) -> float:
    """PSNR in dB over all samples, capped at 99 dB for identical inputs."""
    pa = a.pixels if isinstance(a, Frame) else np.asarray(a)
    pb = b.pixels if isinstance(b, Frame) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValueError(f"cannot compare {pa.shape} with {pb.shape}")
    mse = float(np.mean((pa.astype(np.float64) - pb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


@dataclass(frozen=True)
class FrameRecord:
    frame: int
    bytes_sent: int
    packets_sent: int
    packets_lost: int
    rendered: bool
    psnr_db: Optional[float]
    latency_ms: Optional[float]
    kind: str = "token"


@dataclass(frozen=True)
class Summary:
    frames: int
    median_psnr_db: float
    p10_psnr_db: float
    worst10_mean_psnr_db: float
    non_rendered_pct: float
    mean_bitrate_bps: float
    latency_mean_ms: float
    latency_max_ms: float


def nearest_rank(sorted_values, pct: float):
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def summarize(records, fps=30) -> Summary:
    if not records:
        raise ValueError("cannot summarise an empty run")
    shown = sorted(r.psnr_db for r in records if r.psnr_db is not None)
    lat = [r.latency_ms for r in records if r.latency_ms is not None]
    n = len(records)
    if shown:
        worst = shown[: max(1, math.ceil(0.1 * len(shown)))]
        med, p10, w10 = nearest_rank(shown, 50), nearest_rank(shown, 10), sum(worst) / len(worst)
    else:
        med = p10 = w10 = float("nan")
    duration_s = n / float(Fraction(fps))
    return Summary(
        frames=n,
        median_psnr_db=med,
        p10_psnr_db=p10,
        worst10_mean_psnr_db=w10,
        non_rendered_pct=100.0 * sum(not r.rendered for r in records) / n,
        mean_bitrate_bps=sum(r.bytes_sent for r in records) * 8 / duration_s,
        latency_mean_ms=sum(lat) / len(lat) if lat else float("nan"),
        latency_max_ms=max(lat) if lat else float("nan"),
    )


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CodebookSpec:
    """How to fit a codebook when no codebook file is given."""

    size: int = 64
    h: int = 16
    w: int = 16
    d: int = 2
    iters: int = 25
    seed: int = 0
    frames: int = 200
    source: Optional[dict] = None  # defaults to the session source


@dataclass(frozen=True)
class RunConfig:
    scheme: str = "token"
    source: dict = field(default_factory=lambda: {"kind": "synth", "seed": 1})
    frames: int = 300
    codebook: Optional[str] = None
    fit: CodebookSpec = CodebookSpec()
    model: Optional[str] = None
    recovery: str = "temporal"
    layout: tuple[int, int] = (2, 2)
    channel: ChannelConfig = ChannelConfig.lossless()
    target_bps: Optional[float] = None
    playout_delay_ms: float = 100.0
    threshold_db: float = 30.0
    baseline: DeltaCodecConfig = DeltaCodecConfig()
    ack_loss: float = 0.0
    seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.scheme not in ("token", "baseline"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.threshold_db <= 0:
            raise ConfigError("non-rendered threshold must be positive")
        if self.playout_delay_ms < self.channel.propagation_ms:
            raise ConfigError("playout delay shorter than the propagation delay")
        if self.recovery not in ("static", "temporal", "spatial", "model"):
            raise ConfigError(f"unknown recovery mode {self.recovery!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "channel" in d:
            d["channel"] = ChannelConfig.from_dict(d["channel"])
        if "fit" in d:
            d["fit"] = CodebookSpec(**d["fit"])
        if "baseline" in d:
            d["baseline"] = DeltaCodecConfig(**d["baseline"])
        if "layout" in d:
            d["layout"] = tuple(d["layout"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, seed=None, scheme=None, loss_level=None, target_kbps=None, out_dir=None) -> "RunConfig":
        cfg = self
        if scheme is not None:
            cfg = replace(cfg, scheme=scheme)
        if seed is not None:
            cfg = replace(cfg, seed=seed, channel=replace(cfg.channel, ge=replace(cfg.channel.ge, seed=seed)))
        if loss_level is not None:
            ge = GEParams(loss_bad=LOSS_LEVELS[loss_level], seed=cfg.channel.ge.seed)
            cfg = replace(cfg, channel=replace(cfg.channel, mode="ge", ge=ge))
        if target_kbps is not None:
            cfg = replace(cfg, target_bps=1000.0 * target_kbps)
        if out_dir is not None:
            cfg = replace(cfg, out_dir=str(out_dir))
        return cfg


def make_source(spec: dict, count: Optional[int] = None):
    kind = spec.get("kind", "synth")
    if kind == "synth":
        opts = {k: v for k, v in spec.items() if k != "kind"}
        seed = opts.pop("seed", 0)
        return open_video(SynthConfig.random(seed, **opts), count)
    if kind in ("y4m", "raw", "file"):
        return open_video(spec["path"], count)
    raise ConfigError(f"unknown source kind {kind!r}")


def load_frames(spec: dict, count: int) -> list[Frame]:
    _, reader = make_source(spec, count)
    with reader:
        frames = []
        for f in reader:
            frames.append(f)
            if len(frames) == count:
                break
    return frames


def resolve_codebook(cfg: RunConfig) -> Codebook:
    if cfg.codebook:
        return Codebook.load(cfg.codebook)
    spec = cfg.fit
    frames = load_frames(spec.source or cfg.source, spec.frames)
    if not frames:
        raise ConfigError("no frames to fit a codebook")
    geom = PatchGeometry.for_frame(frames[0].meta.height, frames[0].meta.width, spec.h, spec.w, spec.d)
    return fit_codebook(frames, spec.size, geom, spec.iters, spec.seed)


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

@dataclass
class SessionTrace:
    """Optional per-frame internals, for tests and debugging."""

    sent_tokens: list = field(default_factory=list)
    received: list = field(default_factory=list)
    recovered: list = field(default_factory=list)
    codec_psnr: list = field(default_factory=list)
    wire_bytes: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    payload_bytes: list = field(default_factory=list)
    displays: list = field(default_factory=list)


def _run_token(cfg: RunConfig, frames, codebook: Codebook, model, channel: Channel, trace):
    geom = codebook.geometry
    layout = PacketLayout(*cfg.layout)
    m = layout.tokens_per_packet(geom)
    bits = codebook.bits_per_index
    fps = frames[0].meta.fps if frames else 30
    d = 0
    if cfg.target_bps is not None:
        _, d = drop_ratio_for_target(cfg.target_bps, layout, geom, bits, fps)
    ctx = RecoveryContext()
    records = []
    for frame in frames:
        t = frame.capture_time
        deadline = t + cfg.playout_delay_ms
        tokens = encode(frame, codebook)
        wires = []
        for pkt in packetize(tokens, frame.index, layout):
            pkt = apply_self_drop(pkt, select_drops(pkt.frame_idx, pkt.pkt_idx, m, d))
            wires.append(serialize_packet(pkt, bits))
        received = []
        for wire in wires:
            at = channel.transmit(len(wire), t, frame.index)
            if at is not None and at <= deadline:
                received.append(parse_packet(wire, bits))
        survivors = {p.pkt_idx: recover_survivor_positions(p.frame_idx, p.pkt_idx, m, p.token_count)
                     for p in received}
        masked = depacketize(received, layout, geom, survivors)
        ctx.push(masked)
        rec = recover(ctx, cfg.recovery, codebook.mode_token, model)
        shown = decode_pixels(rec, codebook)
        score = psnr(shown, frame.pixels)
        records.append(FrameRecord(
            frame=frame.index, bytes_sent=sum(len(w) for w in wires), packets_sent=len(wires),
            packets_lost=len(wires) - len(received), rendered=score >= cfg.threshold_db,
            psnr_db=score, latency_ms=cfg.playout_delay_ms,
        ))
        if trace is not None:
            trace.sent_tokens.append(tokens)
            trace.received.append(masked)
            trace.recovered.append(rec)
            trace.codec_psnr.append(psnr(decode_pixels(tokens, codebook), frame.pixels))
            trace.wire_bytes.append([len(w) for w in wires])
            trace.displays.append(shown)
    return records


def _run_baseline(cfg: RunConfig, frames, geometry: PatchGeometry, channel: Channel, trace):
    fps = float(frames[0].meta.fps) if frames else 30.0
    sender = BaselineSender.create(cfg.baseline, fps, rtt_ms=2 * cfg.channel.propagation_ms)
    receiver = BaselineReceiver((geometry.h, geometry.w, geometry.channels), geometry)
    acks = AckPath(reverse_channel(cfg.ack_loss, seed=cfg.seed ^ 0xACC, propagation_ms=cfg.channel.propagation_ms))
    records = []
    for frame in frames:
        step = baseline_step(sender, receiver, channel, acks, frame, frame.capture_time, cfg.playout_delay_ms)
        records.append(FrameRecord(
            frame=frame.index, bytes_sent=step.bytes_sent, packets_sent=step.packets_sent,
            packets_lost=step.packets_lost, rendered=step.rendered,
            psnr_db=psnr(step.display, frame.pixels), latency_ms=cfg.playout_delay_ms,
            kind="key" if step.kind == KEY else "delta",
        ))
        if trace is not None:
            trace.kinds.append(step.kind)
            trace.payload_bytes.append(step.payload_bytes)
            trace.wire_bytes.append(step.bytes_sent)
            trace.displays.append(step.display)
    return records


def run_session(cfg: RunConfig, codebook: Optional[Codebook] = None, model: Optional[ContextModel] = None,
                frames: Optional[list] = None, trace: Optional[SessionTrace] = None,
                channel: Optional[Channel] = None) -> list[FrameRecord]:
    """Run one session and return its per-frame records.

    ``codebook``, ``model`` and ``frames`` override what ``cfg`` would load.
    """
    if frames is None:
        frames = load_frames(cfg.source, cfg.frames)
    if len(frames) < cfg.frames:
        raise ConfigError(f"source exhausted after {len(frames)} of {cfg.frames} frames")
    frames = frames[: cfg.frames]
    if channel is None:
        channel = Channel(cfg.channel)
    if cfg.scheme == "token":
        if codebook is None:
            codebook = resolve_codebook(cfg)
        if cfg.recovery == "model" and model is None:
            if not cfg.model:
                raise ConfigError("recovery 'model' needs a model file")
            model = ContextModel.load(cfg.model)
        return _run_token(cfg, frames, codebook, model, channel, trace)
    if codebook is not None:
        geom = codebook.geometry
    else:
        meta = frames[0].meta
        geom = PatchGeometry.for_frame(meta.height, meta.width, cfg.fit.h, cfg.fit.w, cfg.fit.d)
    return _run_baseline(cfg, frames, geom, channel, trace)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

CSV_HEADER = ("frame", "bytes", "packets_lost", "rendered", "psnr_db", "latency_ms")


def records_csv(records) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(CSV_HEADER)
    for r in records:
        out.writerow([
            r.frame, r.bytes_sent, r.packets_lost, int(r.rendered),
            "" if r.psnr_db is None else f"{r.psnr_db:.6f}",
            "" if r.latency_ms is None else f"{r.latency_ms:.3f}",
        ])
    return buf.getvalue()


def summary_json(summary: Summary) -> str:
    clean = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(summary).items()}
    return json.dumps(clean, indent=2, sort_keys=True) + "\n"


def emit_report(records, summary: Summary, csv_path, json_path) -> None:
    """Write the per-frame CSV and the summary JSON (both or neither)."""
    if not records:
        raise ValueError("no records to report")
    csv_text = records_csv(records)
    json_text = summary_json(summary)
    written = []
    try:
        for path, text in ((Path(csv_path), csv_text), (Path(json_path), json_text)):
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(text)
            written.append((tmp, path))
        for tmp, path in written:
            os.replace(tmp, path)
    except OSError:
        for tmp, _ in written:
            tmp.unlink(missing_ok=True)
        raise


def read_records_csv(path) -> list[FrameRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        FrameRecord(
            frame=int(r["frame"]), bytes_sent=int(r["bytes"]), packets_sent=0,
            packets_lost=int(r["packets_lost"]), rendered=r["rendered"] == "1",
            psnr_db=float(r["psnr_db"]) if r["psnr_db"] else None,
            latency_ms=float(r["latency_ms"]) if r["latency_ms"] else None,
        )
        for r in rows
    ]

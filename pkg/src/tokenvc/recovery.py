"""Receiver-side token recovery.

Three deterministic fills (static, temporal, spatial) and a linear-softmax
context model. The model scores every codebook entry for a missing cell from
14 context symbols: the 8 spatial neighbours in the current frame
(NW, N, NE, W, E, SW, S, SE) followed by the same position in the previous
1..T frames. A context position that was not *received* reads as the mask
symbol ``N``; recovered values never feed back into contexts.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .bitrate import SplitMix64, recover_survivor_positions, shuffled_prefix
from .packetizer import FRAME_MOD, MISSING, PacketLayout

T_CONTEXT = 6
NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
SPATIAL_PASSES = 8
F32_MAX = float(np.finfo(np.float32).max)
MODES = ("static", "temporal", "spatial", "model")


class TrainingError(RuntimeError):
    pass


class RecoveryContext:
    """The current masked grid plus up to ``T`` previous grids as received."""

    def __init__(self, current: np.ndarray | None = None, history: Iterable[np.ndarray] = (), depth: int = T_CONTEXT):
        self.depth = depth
        self.history: deque[np.ndarray] = deque(maxlen=depth)
        for g in history:
            self.history.append(np.asarray(g))
        self.current = None if current is None else np.asarray(current)
        shapes = {g.shape for g in self.history} | ({self.current.shape} if self.current is not None else set())
        if len(shapes) > 1:
            raise ValueError(f"context grids disagree on shape: {sorted(shapes)}")

    def push(self, grid: np.ndarray) -> None:
        """Make ``grid`` current, moving the previous current grid into history."""
        if self.current is not None:
            self.history.append(self.current)
        self.current = np.asarray(grid)

    def clear(self) -> None:
        self.history.clear()
        self.current = None


# ---------------------------------------------------------------------------
# Deterministic fills
# ---------------------------------------------------------------------------

def _vote(values: list[int]) -> int:
    counts: dict[int, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return min(counts, key=lambda v: (-counts[v], v))


def _spatial_fill(grid: np.ndarray, fallback: int) -> np.ndarray:
    g = grid.copy()
    h, w = g.shape
    for _ in range(SPATIAL_PASSES):
        holes = np.argwhere(g == MISSING)
        if holes.size == 0:
            break
        nxt = g.copy()
        changed = False
        for i, j in holes.tolist():
            vals = [
                int(g[i + di, j + dj])
                for di, dj in NEIGHBOURS
                if 0 <= i + di < h and 0 <= j + dj < w and g[i + di, j + dj] != MISSING
            ]
            if vals:
                nxt[i, j] = _vote(vals)
                changed = True
        g = nxt
        if not changed:
            break
    g[g == MISSING] = fallback
    return g


def fill_heuristic(ctx: RecoveryContext, mode: str, fallback_token: int) -> np.ndarray:
    """Fill every MISSING cell of ``ctx.current``.

    ``static`` uses ``fallback_token`` (the corpus' most frequent token);
    ``temporal`` copies the most recent received token at the same position,
    then falls back to ``spatial``; ``spatial`` takes the majority of received
    8-neighbours, iterated to a fixpoint (at most 8 passes).
    """
    cur = np.asarray(ctx.current).copy()
    if mode == "static":
        cur[cur == MISSING] = fallback_token
        return cur
    if mode == "temporal":
        for past in reversed(ctx.history):
            hole = cur == MISSING
            if not hole.any():
                break
            take = hole & (past != MISSING)
            cur[take] = past[take]
        return _spatial_fill(cur, fallback_token)
    if mode == "spatial":
        return _spatial_fill(cur, fallback_token)
    raise ValueError(f"unknown heuristic {mode!r}")


# ---------------------------------------------------------------------------
# Context model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ContextModel:
    weights: np.ndarray  # (S, N + 1, N)
    bias: np.ndarray  # (N,)
    depth: int = T_CONTEXT
    train_loss: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        b = np.ascontiguousarray(self.bias, dtype=np.float64)
        n = b.shape[0]
        if w.shape != (8 + self.depth, n + 1, n):
            raise ValueError(f"weights shape {w.shape} != {(8 + self.depth, n + 1, n)}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_tokens(self) -> int:
        return self.bias.shape[0]

    @property
    def slots(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, n: int, depth: int = T_CONTEXT) -> "ContextModel":
        return cls(np.zeros((8 + depth, n + 1, n)), np.zeros(n), depth)

    def __eq__(self, other):
        return (
            isinstance(other, ContextModel)
            and self.depth == other.depth
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )

    def to_bytes(self) -> bytes:
        head = b"TCRM" + struct.pack("<HIII", 1, self.n_tokens, self.slots, self.depth)
        return head + self.weights.astype("<f4").tobytes() + self.bias.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ContextModel":
        if data[:4] != b"TCRM":
            raise ValueError("not a recovery model file (bad magic)")
        version, n, s, t = struct.unpack_from("<HIII", data, 4)
        if version != 1:
            raise ValueError(f"unsupported model version {version}")
        off = 4 + struct.calcsize("<HIII")
        nw = s * (n + 1) * n
        if len(data) != off + 4 * (nw + n):
            raise ValueError("model file length does not match its header")
        w = np.frombuffer(data, "<f4", nw, off).astype(np.float64).reshape(s, n + 1, n)
        b = np.frombuffer(data, "<f4", n, off + 4 * nw).astype(np.float64)
        return cls(w, b, t)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ContextModel":
        return cls.from_bytes(Path(path).read_bytes())


def context_symbols(current: np.ndarray, history: Sequence[np.ndarray], cells: np.ndarray, n: int,
                    depth: int = T_CONTEXT) -> np.ndarray:
    """``(len(cells), 8 + depth)`` context symbols; ``n`` marks a masked slot.

    ``history`` is oldest first, as kept by :class:`RecoveryContext`.
    """
    cur = np.asarray(current)
    h, w = cur.shape
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    padded = np.full((h + 2, w + 2), MISSING, dtype=np.int64)
    padded[1:-1, 1:-1] = cur
    ii, jj = cells[:, 0], cells[:, 1]
    sym = np.empty((cells.shape[0], 8 + depth), dtype=np.int64)
    for s, (di, dj) in enumerate(NEIGHBOURS):
        sym[:, s] = padded[ii + 1 + di, jj + 1 + dj]
    hist = list(history)[-depth:]
    for k in range(1, depth + 1):
        sym[:, 7 + k] = hist[-k][ii, jj] if k <= len(hist) else MISSING
    sym[sym == MISSING] = n
    return sym


def model_scores(symbols: np.ndarray, model: ContextModel) -> np.ndarray:
    """Unnormalised scores, ``bias + sum_s W[s, symbol_s]``; one row per context."""
    sym = np.asarray(symbols, dtype=np.int64)
    single = sym.ndim == 1
    sym = np.ascontiguousarray(sym.reshape(-1, model.slots))
    if sym.size and (sym.min() < 0 or sym.max() > model.n_tokens):
        raise ValueError(f"context symbol outside [0, {model.n_tokens}]")
    out = kernels.context_scores(sym, model.weights, model.bias)
    return out[0] if single else out


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_tokens(ctx: RecoveryContext, model: ContextModel) -> np.ndarray:
    """Argmax fill of every MISSING cell in one pass (ties -> lowest index)."""
    cur = np.asarray(ctx.current).copy()
    holes = np.argwhere(cur == MISSING)
    if holes.size == 0:
        return cur
    sym = context_symbols(cur, ctx.history, holes, model.n_tokens, model.depth)
    cur[holes[:, 0], holes[:, 1]] = np.argmax(model_scores(sym, model), axis=1)
    return cur


def recover(ctx: RecoveryContext, mode: str, fallback_token: int, model: ContextModel | None = None) -> np.ndarray:
    if mode == "model":
        if model is None:
            raise ValueError("model recovery needs a trained ContextModel")
        return predict_tokens(ctx, model)
    return fill_heuristic(ctx, mode, fallback_token)


# ---------------------------------------------------------------------------
# Loss simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSimConfig:
    rd_min: float = 0.0
    rd_max: float = 0.6
    rd_mode: float = 0.3
    rd_std: float = 0.3
    rp_min: float = 0.0
    rp_max: float = 0.8
    seed: int = 0

    @classmethod
    def fixed(cls, rd: float, rp: float, seed: int = 0) -> "LossSimConfig":
        return cls(rd, rd, rd, 0.0, rp, rp, seed)

    def sample_rd(self, rng: SplitMix64) -> float:
        if self.rd_max <= self.rd_min:
            return self.rd_min
        while True:
            x = self.rd_mode + self.rd_std * rng.normal()
            if self.rd_min <= x <= self.rd_max:
                return x

    def sample_rp(self, rng: SplitMix64) -> float:
        return self.rp_min + (self.rp_max - self.rp_min) * rng.uniform()


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def mask_frame(grid: np.ndarray, frame_idx: int, layout: PacketLayout, d: int, packet_lost: Sequence[bool]) -> np.ndarray:
    """Masked grid after self-dropping ``d`` tokens per packet and losing packets."""
    h, w = grid.shape
    out = np.full((h, w), MISSING, dtype=np.int64)
    positions = layout.positions(h, w)
    m = positions[0].shape[0]
    for k, pos in enumerate(positions):
        if packet_lost[k]:
            continue
        keep = pos[list(recover_survivor_positions(frame_idx % FRAME_MOD, k, m, m - d))]
        out[keep[:, 0], keep[:, 1]] = grid[keep[:, 0], keep[:, 1]]
    return out


def simulate_losses(grids: np.ndarray, cfg: LossSimConfig, rng: SplitMix64, layout: PacketLayout = PacketLayout(),
                    frame_indices: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Mask a ``(T+1, h, w)`` window as the receiver would see it.

    One self-drop ratio and one packet-loss rate are drawn per window. Returns
    ``(masked, truth, r_d, r_p)``.
    """
    truth = np.asarray(grids, dtype=np.int64)
    n_frames, h, w = truth.shape
    if frame_indices is None:
        frame_indices = range(n_frames)
    layout.check(h, w)
    m = (h // layout.pr) * (w // layout.pc)
    rd = cfg.sample_rd(rng)
    rp = cfg.sample_rp(rng)
    d = min(m, _round_half_up(rd * m))
    masked = np.empty_like(truth)
    for f in range(n_frames):
        lost = [rng.uniform() < rp for _ in range(layout.packets)]
        masked[f] = mask_frame(truth[f], frame_indices[f], layout, d, lost)
    return masked, truth, rd, rp


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    # The loss is a per-cell mean, so per-token gradients are small; rare
    # tokens need a large step and many passes before the diagonal
    # "copy from the previous frame" weights dominate the bias.
    lr: float = 5.0
    batch: int = 32
    epochs: int = 150
    label_smoothing: float = 0.1


def objective(weights: np.ndarray, bias: np.ndarray, symbols: np.ndarray, targets: np.ndarray,
              label_smoothing: float = 0.1, with_grad: bool = True):
    """Mean label-smoothed cross-entropy over the given cells.

    Returns ``(loss, dW, db)``; the gradient is exact for the linear-softmax
    model: ``d loss / d scores = (softmax - q) / M``.
    """
    n = bias.shape[0]
    m = symbols.shape[0]
    scores = kernels.context_scores(symbols, weights, bias)
    z = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    q = np.full((m, n), label_smoothing / n)
    q[np.arange(m), targets] += 1.0 - label_smoothing
    loss = float(-(q * logp).sum() / m)
    if not with_grad:
        return loss, None, None
    g = (np.exp(logp) - q) / m
    dw = kernels.scatter_grad(symbols, g, weights.shape[0], weights.shape[1])
    return loss, dw, g.sum(axis=0)


def _as_sequences(corpus) -> list[np.ndarray]:
    if isinstance(corpus, np.ndarray) and corpus.ndim == 3:
        return [corpus.astype(np.int64)]
    return [np.asarray(seq, dtype=np.int64) for seq in corpus]


def training_cells(seqs: list[np.ndarray], windows: Sequence[tuple[int, int]], loss_cfg: LossSimConfig,
                   rng: SplitMix64, layout: PacketLayout, n: int, depth: int):
    """Symbols and targets for the missing cells of each window's last frame."""
    syms, tgts = [], []
    for si, t in windows:
        seq = seqs[si]
        masked, truth, _, _ = simulate_losses(seq[t - depth:t + 1], loss_cfg, rng, layout, range(t - depth, t + 1))
        holes = np.argwhere(masked[-1] == MISSING)
        if holes.size == 0:
            continue
        syms.append(context_symbols(masked[-1], list(masked[:-1]), holes, n, depth))
        tgts.append(truth[-1][holes[:, 0], holes[:, 1]])
    if not syms:
        return np.zeros((0, 8 + depth), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(syms), np.concatenate(tgts)


def train_model(corpus, n: int, loss_cfg: LossSimConfig = LossSimConfig(), hyper: TrainConfig = TrainConfig(),
                seed: int = 0, layout: PacketLayout = PacketLayout(), depth: int = T_CONTEXT) -> ContextModel:
    """Mini-batch SGD on the masked-token objective, zero initialisation.

    ``corpus`` is one ``(F, h, w)`` token-grid sequence or a list of them.
    Training windows are ``depth + 1`` consecutive frames; the loss covers the
    missing cells of the last frame only. The returned model's
    ``train_loss`` holds the mean batch loss of each epoch.
    """
    seqs = _as_sequences(corpus)
    windows = [(si, t) for si, seq in enumerate(seqs) for t in range(depth, seq.shape[0])]
    if not windows:
        raise TrainingError(f"corpus has no window of {depth + 1} consecutive frames")
    rng = SplitMix64(seed)
    sim_rng = SplitMix64(loss_cfg.seed ^ (seed * 0x9E3779B97F4A7C15 & ((1 << 64) - 1)))
    w = np.zeros((8 + depth, n + 1, n))
    b = np.zeros(n)
    epoch_loss = []
    for epoch in range(hyper.epochs):
        order = shuffled_prefix(rng.next_u64(), len(windows), len(windows))
        losses = []
        for start in range(0, len(order), hyper.batch):
            batch = [windows[i] for i in order[start:start + hyper.batch]]
            sym, tgt = training_cells(seqs, batch, loss_cfg, sim_rng, layout, n, depth)
            if tgt.size == 0:
                continue
            loss, dw, db = objective(w, b, sym, tgt, hyper.label_smoothing)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} in epoch {epoch}, batch at {start}; lr={hyper.lr}")
            losses.append(loss)
            w -= hyper.lr * dw
            b -= hyper.lr * db
            if not (np.abs(b).max() < F32_MAX and np.abs(w).max() < F32_MAX):
                raise TrainingError(f"parameters diverged in epoch {epoch}, batch at {start}; lr={hyper.lr}")
        epoch_loss.append(float(np.mean(losses)) if losses else float("nan"))
    # store float32-exact parameters so a saved model reloads bit-identically
    w32 = w.astype(np.float32).astype(np.float64)
    b32 = b.astype(np.float32).astype(np.float64)
    return ContextModel(w32, b32, depth, tuple(epoch_loss))


def evaluate_accuracy(seq: np.ndarray, loss_cfg: LossSimConfig, n: int, fallback_token: int,
                      model: ContextModel | None = None, layout: PacketLayout = PacketLayout(),
                      depth: int = T_CONTEXT, seed: int = 0) -> dict[str, float]:
    """Token accuracy on the missing cells of every frame of ``seq``.

    Each frame is masked once with ``loss_cfg``; history holds the masked
    (received-only) previous frames, as at a real receiver.
    """
    seq = np.asarray(seq, dtype=np.int64)
    rng = SplitMix64(seed)
    ctx = RecoveryContext(depth=depth)
    modes = ["static", "temporal", "spatial"] + (["model"] if model is not None else [])
    hits = {k: 0 for k in modes}
    total = 0
    for f in range(seq.shape[0]):
        masked, _, _, _ = simulate_losses(seq[f:f + 1], loss_cfg, rng, layout, [f])
        ctx.push(masked[0])
        holes = masked[0] == MISSING
        total += int(holes.sum())
        for k in modes:
            rec = recover(ctx, k, fallback_token, model)
            hits[k] += int((rec[holes] == seq[f][holes]).sum())
    return {k: (hits[k] / total if total else float("nan")) for k in modes}

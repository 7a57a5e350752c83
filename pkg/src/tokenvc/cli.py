"""Command line entry point: ``tokenvc <subcommand>``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .channel import LOSS_LEVELS
from .codec import encode
from .harness import (ConfigError, RunConfig, emit_report, load_frames, read_records_csv, resolve_codebook,
                      run_session, summarize, summary_json)
from .packetizer import PacketLayout
from .recovery import LossSimConfig, TrainConfig, train_model

log = logging.getLogger("tokenvc")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        seed=args.seed, scheme=getattr(args, "scheme", None), loss_level=getattr(args, "loss_level", None),
        target_kbps=getattr(args, "target_kbps", None), out_dir=args.out_dir,
    )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit_codebook(args) -> None:
    cfg = _config(args)
    fit = cfg.fit
    if args.size is not None:
        fit = replace(fit, size=args.size)
    if args.iters is not None:
        fit = replace(fit, iters=args.iters)
    if args.frames is not None:
        fit = replace(fit, frames=args.frames)
    if args.seed is not None:
        fit = replace(fit, seed=args.seed)
    cb = resolve_codebook(replace(cfg, codebook=None, fit=fit))
    out = Path(args.out) if args.out else _out_dir(cfg) / "codebook.tcbk"
    cb.save(out)
    print(f"codebook: N={cb.size} C={cb.geometry.channels} grid={cb.geometry.h}x{cb.geometry.w} "
          f"final mse={cb.fit_mse[-1]:.4f} -> {out}")


def cmd_train_recovery(args) -> None:
    cfg = _config(args)
    cb = resolve_codebook(cfg)
    frames = load_frames(cfg.source, args.frames or cfg.frames)
    corpus = np.stack([encode(f, cb) for f in frames])
    hyper = TrainConfig()
    if args.epochs is not None:
        hyper = replace(hyper, epochs=args.epochs)
    if args.lr is not None:
        hyper = replace(hyper, lr=args.lr)
    model = train_model(corpus, cb.size, LossSimConfig(seed=cfg.seed), hyper, seed=cfg.seed,
                        layout=PacketLayout(*cfg.layout))
    out = Path(args.out) if args.out else _out_dir(cfg) / "recovery.tcrm"
    model.save(out)
    losses = ", ".join(f"{x:.4f}" for x in model.train_loss)
    print(f"recovery model: epoch losses [{losses}] -> {out}")


def _run_one(cfg: RunConfig, out: Path):
    records = run_session(cfg)
    frames = load_frames(cfg.source, 1)
    fps = frames[0].meta.fps if frames else 30
    summary = summarize(records, fps)
    emit_report(records, summary, out / "frames.csv", out / "summary.json")
    return summary


def cmd_run(args) -> None:
    cfg = _config(args)
    out = _out_dir(cfg)
    summary = _run_one(cfg, out)
    sys.stdout.write(summary_json(summary))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    out = _out_dir(cfg)
    rows = []
    for scheme in args.schemes.split(","):
        for level in args.levels.split(","):
            sub = cfg.with_overrides(scheme=scheme, loss_level=level)
            s = _run_one(sub, out / f"{scheme}-{level}")
            rows.append([scheme, level, f"{s.median_psnr_db:.4f}", f"{s.p10_psnr_db:.4f}",
                         f"{s.worst10_mean_psnr_db:.4f}", f"{s.non_rendered_pct:.4f}", f"{s.mean_bitrate_bps:.1f}"])
            print(f"{scheme:8s} {level:4s} median={s.median_psnr_db:.2f} dB p10={s.p10_psnr_db:.2f} dB "
                  f"non-rendered={s.non_rendered_pct:.1f}%")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "loss_level", "median_psnr_db", "p10_psnr_db", "worst10_mean_psnr_db",
                    "non_rendered_pct", "mean_bitrate_bps"])
        w.writerows(rows)


def cmd_report(args) -> None:
    records = read_records_csv(args.input)
    text = summary_json(summarize(records, args.fps))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tokenvc", description="Loss-resilient token video transport simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config (JSON)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")

    sp = sub.add_parser("fit-codebook", help="fit a k-means codebook")
    common(sp)
    sp.add_argument("--size", type=int)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit_codebook)

    sp = sub.add_parser("train-recovery", help="train the context recovery model")
    common(sp)
    sp.add_argument("--frames", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train_recovery)

    for name, fn in (("run", cmd_run), ("sweep", cmd_sweep)):
        sp = sub.add_parser(name, help=f"{name} session(s) and write reports")
        common(sp)
        sp.add_argument("--scheme", choices=["token", "baseline"])
        sp.add_argument("--loss-level", choices=sorted(LOSS_LEVELS))
        sp.add_argument("--target-kbps", type=float)
        if name == "sweep":
            sp.add_argument("--schemes", default="token,baseline")
            sp.add_argument("--levels", default="low,med,high")
        sp.set_defaults(func=fn)

    sp = sub.add_parser("report", help="summarise a per-frame CSV")
    sp.add_argument("--input", required=True)
    sp.add_argument("--fps", type=float, default=30.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"tokenvc: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

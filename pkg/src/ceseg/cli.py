"""Command-line entry point: gen-data / train / eval / report.

One binary, subcommand style. Every command reads an optional JSON config
(--config) and applies flag overrides on top; all randomness funnels through
the single seed in that config (or --seed). Exit codes: 0 ok, 2 bad
configuration, 3 data problem (missing or malformed files), 4 runtime
failure. The CESEG_THREADS environment variable caps compute threads; runs
are bit-reproducible when it is 1.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import torch

from .config import PROFILES, RunConfig, load_run_config
from .data import generate_dataset
from .errors import CesegError, ConfigurationError, FormatError, InputError
from .report import generate_report
from .training import VARIANTS, count_parameters, evaluate, train


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    profile = getattr(args, "profile", None) or cfg.train.profile
    cfg = cfg.with_profile(profile)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _required_out(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.paths.out
    if not out:
        raise ConfigurationError("no output directory: pass --out or set paths.out")
    return Path(out)


def _required_data(args, cfg: RunConfig) -> Path:
    data = getattr(args, "data", None) or cfg.paths.data
    if not data:
        raise ConfigurationError("no dataset manifest: pass --data or set paths.data")
    return Path(data)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out_dir = _required_out(args, cfg)
    manifest = generate_dataset(cfg.phantom, out_dir, folds=args.folds or 0)
    print(f"wrote {cfg.phantom.n_cases} cases under {out_dir}")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = _required_out(args, cfg)
    manifest = _required_data(args, cfg)
    result = train(cfg, manifest, out_dir, variant=args.variant, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {args.variant} for {cfg.train.epochs} epochs (seed {cfg.train.seed})")
    if last:
        val = last.get("val_dsc")
        val_text = f"{val:.2f}" if val is not None else "n/a"
        print(f"final train_loss {last['train_loss']:.4f}, val DSC {val_text}")
    counts = count_parameters(result.checkpoint_last)
    print(
        f"parameters: backbone {counts['backbone']}, context block {counts['ce_block']}, "
        f"total {counts['total']}"
    )
    print(f"best checkpoint: {result.checkpoint_best}")
    print(f"last checkpoint: {result.checkpoint_last}")
    print(f"log: {result.log_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    checkpoint = args.checkpoint or cfg.paths.checkpoint
    if not checkpoint:
        raise ConfigurationError("no checkpoint: pass one as the positional argument")
    manifest = _required_data(args, cfg)
    out_dir = _required_out(args, cfg)
    report = evaluate(checkpoint, manifest, split=args.split, out_dir=out_dir)
    print(f"evaluated {len(report.per_case)} {args.split} case(s)")
    for key, agg in report.aggregate.items():
        print(f"  {key}: {agg['mean']:.2f} ± {agg['sd']:.2f} (n={agg['n']})")
    print(f"report: {out_dir / 'report.json'}")
    return 0


def cmd_report(args) -> int:
    if len(args.reports) < 2:
        raise ConfigurationError(
            f"need at least 2 reports to compare, got {len(args.reports)}"
        )
    labels = args.labels.split(",") if args.labels else None
    outputs = generate_report(args.reports, args.out, labels=labels)
    print((outputs["table"]).read_text(), end="")
    for name, path in outputs.items():
        print(f"{name}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ceseg",
        description="Slice-context segmentation experiments on synthetic volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True, profile=True):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="override all config seeds")
        if profile:
            p.add_argument("--profile", choices=sorted(PROFILES), help="scale preset")

    p = sub.add_parser("gen-data", help="generate a phantom dataset + manifest")
    add_common(p)
    p.add_argument("--folds", type=int, help="also write this many cross-validation folds")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model variant")
    add_common(p)
    p.add_argument("--data", help="dataset manifest (overrides paths.data)")
    p.add_argument("--variant", choices=VARIANTS, default="ce")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("checkpoint", nargs="?", help="checkpoint archive")
    add_common(p, seed=False, profile=False)
    p.add_argument("--data", help="dataset manifest (overrides paths.data)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare 2+ metric reports")
    p.add_argument("reports", nargs="+", help="report.json files (first = reference)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--labels", help="comma-separated run labels")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_thread_cap() -> None:
    value = os.environ.get("CESEG_THREADS")
    if value is None:
        return
    try:
        threads = int(value)
        if threads < 1:
            raise ValueError
    except ValueError:
        raise ConfigurationError(
            f"CESEG_THREADS must be a positive integer, got {value!r}"
        ) from None
    torch.set_num_threads(threads)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CesegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

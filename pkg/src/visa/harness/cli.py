"""Command line entry point: ``visa <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from visa.harness.config import RunConfig, apply_env, load_config


def _config(path: Optional[str]) -> RunConfig:
    return load_config(path) if path else apply_env(RunConfig())


def _split_list(items: Sequence[str]) -> List[str]:
    return [v for item in items for v in item.split(",") if v]


def cmd_gen_data(args: argparse.Namespace) -> int:
    from visa.synthetic import generate_dataset, write_dataset

    cfg = _config(args.config)
    root = args.out or cfg.data.root
    if root is None:
        print("no output directory: pass --out or set data.root", file=sys.stderr)
        return 2
    manifest = write_dataset(generate_dataset(cfg.data.synthetic), Path(root))
    print(manifest)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from visa.harness.train import train

    cfg = _config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if cfg.out_dir is None:
        cfg.out_dir = "runs/default"
    train(cfg)
    print(Path(cfg.out_dir) / "final.pt")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from visa.harness.evaluate import evaluate
    from visa.synthetic import load_dataset

    dataset = load_dataset(Path(args.data)) if args.data else None
    prefix = args.out or str(Path(args.ckpt).with_suffix("")) + "_eval"
    reports = evaluate(args.ckpt, dataset, _split_list(args.protocols), prefix)
    for r in reports:
        print(f"{r.protocol:<5} rank1 {r.rank1:.4f}  mAP {r.map:.4f}  queries {r.num_queries}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from visa.harness.gradcheck import gradcheck

    results = gradcheck(args.target or None, args.tolerance)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    from visa.harness.sweep import sweep

    cfg = _config(args.config)
    values = [float(v) for v in _split_list(args.values)] if args.values else None
    out = args.out or f"sweep_{args.param}.csv"
    rows = sweep(cfg, args.param, values, _split_list(args.protocols), out)
    print(f"{len(rows)} rows -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset to disk")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (defaults to data.root)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--config")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--protocols", nargs="+", default=["ALL,AG,GG,AA"])
    p.add_argument("--data", help="dataset directory (defaults to the checkpoint's config)")
    p.add_argument("--out", help="report prefix; writes <out>.json and <out>.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--target", action="append", help="repeatable; all targets by default")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train and evaluate over a parameter grid")
    p.add_argument("--config")
    p.add_argument("--param", required=True, choices=["E", "k", "lambda", "K"])
    p.add_argument("--values", nargs="+", help="defaults to the standard grid for the parameter")
    p.add_argument("--protocols", nargs="+", default=["ALL,AG,GG,AA"])
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

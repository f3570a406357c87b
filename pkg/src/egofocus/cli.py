"""Command-line entry point: ``python -m egofocus {generate,train,eval,ablate}``.

Exit codes: 0 success, 2 invalid config or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .harness import ConfigError
from .scenarios import ScenarioError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egofocus", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags below override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--scenarios", help="scenario JSONL path")
    common.add_argument("--checkpoint", help="checkpoint path (eval input, train resume)")
    common.add_argument("--k", type=int, help="number of critical neighbors")
    common.add_argument("--no-elai", action="store_true", help="disable the interactor")
    common.add_argument("--no-fla", action="store_true", help="disable the focal loss")
    sub.add_parser("generate", parents=[common], help="write a synthetic scenario file")
    sub.add_parser("train", parents=[common], help="train on a scenario file")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    sub.add_parser("ablate", parents=[common], help="baseline / interactor / focal-loss sweep")
    return p


def config_from_args(args) -> dict:
    over: dict = {}
    for key in ("seed", "out", "scenarios", "checkpoint"):
        if getattr(args, key) is not None:
            over[key] = getattr(args, key)
    model = {}
    if args.k is not None:
        model["k"] = args.k
    if args.no_elai:
        model["use_elai"] = False
    if args.no_fla:
        model["use_fla"] = False
    if model:
        over["model"] = model
    if args.verb == "eval" and args.config is None and args.checkpoint:
        # Without an explicit config, evaluate with the settings the checkpoint was trained with.
        saved = harness.checkpoint_config(args.checkpoint)
        saved_model = {**saved.get("model", {}), **over.get("model", {})}
        base = {k: saved[k] for k in ("seed", "model") if k in saved}
        return harness.resolve_config({**base, **over, "model": saved_model})
    return harness.load_config(args.config, over)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.verb == "generate":
            path, summary = harness.cmd_generate(cfg)
            print(f"wrote {sum(summary.values())} scenarios to {path}")
            for kind, n in summary.items():
                print(f"  {kind:<10} {n}")
        elif args.verb == "train":
            if not cfg["scenarios"]:
                raise ConfigError("train needs --scenarios")
            res = harness.cmd_train(cfg, cfg["scenarios"], resume=cfg["checkpoint"])
            print(f"checkpoint {res.checkpoint_path}")
            print(f"sha256 {res.checkpoint_hash}")
        elif args.verb == "eval":
            if not cfg["scenarios"] or not cfg["checkpoint"]:
                raise ConfigError("eval needs --checkpoint and --scenarios")
            rep = harness.cmd_eval(cfg, cfg["checkpoint"], cfg["scenarios"])
            for key, value in rep.as_row().items():
                print(f"{key:<8} {value:.4f}")
        elif args.verb == "ablate":
            rows = harness.cmd_ablate(cfg, out_dir=cfg["out"])
            print(harness.format_table(rows))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ScenarioError, OSError, RuntimeError, FloatingPointError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())

"""``objqa`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import load_config
from .errors import ObjqaError


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="run directory (overrides the config)")
    common.add_argument("--set", dest="overrides", action="append", type=_kv, default=[],
                        metavar="KEY=VALUE", help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="objqa", description="Object quality assessment pipeline.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("synth", "render clean digits and their degraded variants"),
                            ("pretrain", "train the recognizer, attach gt-scores, cache features"),
                            ("train-rqa", "train template synthesis and build class templates"),
                            ("train-aqa", "train the absolute scorer and its threshold"),
                            ("score", "write per-image scores"),
                            ("eval", "group-wise SROCC/LCC report"),
                            ("gate", "sequence recognition with and without quality gating")):
        p = sub.add_parser(name, help=help_text, parents=[common])
        if name == "score":
            p.add_argument("--input", help="OQAI image store (default: the run's samples)")
            p.add_argument("--output", help="CSV path (default: <out>/scores.csv)")
        if name == "eval":
            p.add_argument("--ablation", action="store_true",
                           help="also retrain the absolute scorer per loss combination")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = dict(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if getattr(args, "ablation", False):
            overrides["ablation"] = True
        cfg = load_config(args.config, overrides)
        if args.command == "score":
            result = pipeline.score(cfg, args.input, args.output)
        else:
            result = pipeline.STAGES[args.command](cfg)
    except (ObjqaError, OSError) as exc:
        print(f"objqa {args.command}: error: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())

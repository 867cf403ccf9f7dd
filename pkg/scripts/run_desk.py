"""Run every stage at desk scale and print the comparison, ablation and gating tables.

    python3 scripts/run_desk.py --out runs/desk --seed 0 [--skip-ablation]
"""
import argparse
import logging
import time

from objqa import pipeline
from objqa.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--skip-ablation", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, {"out": args.out, "seed": args.seed, "ablation": not args.skip_ablation})
    for stage in ("synth", "pretrain", "train-rqa", "train-aqa", "eval", "gate"):
        t0 = time.perf_counter()
        pipeline.STAGES[stage](cfg)
        print(f"{stage:<10} {time.perf_counter() - t0:7.1f}s", flush=True)
    for name in ("report", "ablation", "gate"):
        path = cfg.out_dir / f"{name}.txt"
        if path.exists():
            print(f"\n== {name}\n{path.read_text()}")


if __name__ == "__main__":
    main()

"""Held-out SROCC of the absolute scorer along training, for several settings.

Needs a run directory that has gone through ``train-rqa``.  Each setting is a
``key=value,key=value`` string of config overrides; the empty string is the
run's own config.

    python3 scripts/aqa_trajectory.py runs/seed1 "aqa_epochs=3000" "aqa_epochs=3000,use_inter=false" --every 250
"""
import argparse

from objqa import aqa, evalgate, pipeline
from objqa.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir")
    ap.add_argument("settings", nargs="*", default=[""])
    ap.add_argument("--config", help="config the run was made with (default: <run_dir>/config.txt)")
    ap.add_argument("--every", type=int, default=250)
    args = ap.parse_args()

    base = load_config(args.config or f"{args.run_dir}/config.txt", {"out": args.run_dir})
    run = pipeline.Run(base)
    groups = pipeline._test_groups(run, base)

    def srocc(values):
        return "  ".join(f"{k} {evalgate.evaluate_groups(g, pipeline._by_id(values)).srocc:.3f}"
                         for k, g in groups.items())

    print(f"RQA      {srocc(run.q_rel)}")
    for setting in args.settings:
        kv = dict(item.split("=", 1) for item in setting.split(",") if item)
        cfg = base.with_overrides(kv)
        print(f"-- {setting or '(run config)'}", flush=True)

        def report(epoch, params):
            if (epoch + 1) % args.every == 0:
                print(f"{epoch + 1:>6}   {srocc(aqa.absolute_scores(params, run.feats))}  th {params.th:.3f}",
                      flush=True)

        pipeline.fit_aqa(run, cfg, cfg.use_intra, cfg.use_inter, report)


if __name__ == "__main__":
    main()

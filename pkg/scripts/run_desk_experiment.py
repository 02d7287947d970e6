"""Run the desk-scale grid and print the ranking table.

    python scripts/run_desk_experiment.py [--config configs/desk.cfg] [--jobs N]
"""

import argparse
import os
import sys

from attr_eval.config import parse_config
from attr_eval.runner import run_experiment

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=os.path.join(HERE, "..", "configs", "desk.cfg"))
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    cfg = parse_config(args.config)
    res = run_experiment(cfg, out_dir=args.out, jobs=args.jobs)
    for name, acc in res.train_accuracy.items():
        print(f"{name}: train accuracy {acc:.3f}")
    print(f"timings: " + ", ".join(f"{k} {v:.1f}s" for k, v in res.timings.items()))
    with open(os.path.join(args.out or cfg.output_dir, "ranking.md")) as fh:
        sys.stdout.write(fh.read())


if __name__ == "__main__":
    main()

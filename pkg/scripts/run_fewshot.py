"""Few-shot PT vs PT+ comparison on the default toy task, printed per round.

    python3 scripts/run_fewshot.py [--config configs/default.yaml] [--out runs/fewshot]
"""

import argparse
from pathlib import Path

import numpy as np

from prefixlab.cli import run_experiment
from prefixlab.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--out", default="runs/fewshot")
    args = ap.parse_args()
    cfg = load_config(args.config)
    results = run_experiment(cfg, Path(args.out), log=lambda *_: None)
    by = {(r.method, r.round): r for r in results}
    methods = list(cfg.methods)
    print("round  " + "  ".join(f"{m:>16}" for m in methods))
    for i in range(cfg.rounds):
        cells = [f"{by[m, i].iid:6.3f} / {by[m, i].train_loss:7.4f}" for m in methods]
        print(f"{i:>5}  " + "  ".join(f"{c:>16}" for c in cells))
    print("(cells: IID accuracy / final training loss)")
    for m in methods:
        rs = [by[m, i] for i in range(cfg.rounds)]
        print(f"{m:<8} mean iid {np.mean([r.iid for r in rs]):.3f}  ood {np.mean([r.ood for r in rs]):.3f}")
    if {"prefix", "ptplus"} <= set(methods):
        gaps = [by["ptplus", i].iid - by["prefix", i].iid for i in range(cfg.rounds)]
        print(f"PT+ - PT IID gap per round (pp): {' '.join(f'{100 * g:+.1f}' for g in gaps)}")


if __name__ == "__main__":
    main()

"""Bias-spectrum comparison of PT and PT+ checkpoints from a finished run.

Writes eigenvalue CSVs per round (for overlay plots) and prints participation
ratios with the PT+ minus PT effect size.

    python3 scripts/spectrum_compare.py --run runs/fewshot [--raw]
"""

import argparse
from pathlib import Path

import numpy as np

from prefixlab.cli import diagnose
from prefixlab.config import load_config
from prefixlab.model import Model
from prefixlab.tasks import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, help="output directory of a run with prefix and ptplus checkpoints")
    ap.add_argument("--raw", action="store_true", help="skip column standardisation of the bias matrix")
    args = ap.parse_args()
    run = Path(args.run)
    cfg = load_config(run / "config.yaml")
    base = Model.load(next((run / "cache").glob("base-*.ckpt")))
    probe = generate(cfg.iid).test[: cfg.diagnose.probe_size]
    effects = []
    for r in range(cfg.rounds):
        tuned = {name: Model.load(run / "checkpoints" / f"{name}-r{r}.ckpt") for name in ("prefix", "ptplus")}
        spectra, _ = diagnose(base, tuned, probe, run / "spectrum" / f"r{r}", cfg.diagnose.layer, cfg.diagnose.head,
                              cfg.diagnose.topk, normalize=not args.raw)
        pt, pp = spectra["prefix"].participation_ratio, spectra["ptplus"].participation_ratio
        effects.append(pp - pt)
        print(f"round {r}: participation ratio PT+ {pp:.3f}  PT {pt:.3f}  effect {pp - pt:+.3f}")
    print(f"mean effect {np.mean(effects):+.3f} (sd {np.std(effects, ddof=1) if len(effects) > 1 else 0.0:.3f})")


if __name__ == "__main__":
    main()

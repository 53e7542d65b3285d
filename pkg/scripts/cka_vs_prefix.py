"""CKA between the base and PT-p models for several prefix lengths.

    python3 scripts/cka_vs_prefix.py --run runs/fewshot [--lengths 4 8 16] [--rounds 2]
"""

import argparse
from pathlib import Path

from prefixlab.config import load_config
from prefixlab.diagnostics import representation_cka
from prefixlab.model import MethodSpec, Model
from prefixlab.tasks import generate, sample_round
from prefixlab.trainer import run_method_round


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", required=True, help="output directory of a run (supplies config and cached base)")
    ap.add_argument("--lengths", type=int, nargs="+", default=[4, 8, 16])
    ap.add_argument("--rounds", type=int, default=1)
    args = ap.parse_args()
    run = Path(args.run)
    cfg = load_config(run / "config.yaml")
    base = Model.load(next((run / "cache").glob("base-*.ckpt")))
    iid, ood = generate(cfg.iid), generate(cfg.ood)
    probe = iid.test[: cfg.diagnose.probe_size]
    for r in range(args.rounds):
        rnd = sample_round(iid, r, cfg.seed)
        scores = []
        for p in args.lengths:
            _, tuned = run_method_round(base, f"pt{p}", MethodSpec("prefix", prefix_len=p), iid, ood, rnd, cfg.optimizer)
            scores.append(representation_cka(base, tuned, probe).score)
        monotone = all(a >= b for a, b in zip(scores, scores[1:]))
        cells = "  ".join(f"p={p}: {s:.4f}" for p, s in zip(args.lengths, scores))
        print(f"round {r}: {cells}  non-increasing={monotone}")


if __name__ == "__main__":
    main()

"""Command line: ``prefixlab run | diagnose | ladder``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
``PREFIXLAB_OUT`` overrides the output directory when ``--out`` is absent.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from . import diagnostics as D
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .ladder import FAULTS, format_table, run_ladder
from .model import Model, pretrain_base
from .tasks import DatasetFormatError, generate, load as load_dataset, sample_round
from .trainer import RoundResult, evaluate, results_csv, run_method_round, summary_table

PARETO_SCHEMA = "prefixlab-pareto/v1"
OUT_ENV = "PREFIXLAB_OUT"


class UsageError(Exception):
    """Bad input detected by the CLI itself (maps to exit code 1)."""


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"v{__version__}-g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _out_dir(arg: Optional[str], fallback: str) -> Path:
    out = Path(arg or os.environ.get(OUT_ENV) or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- run ------------------------------------------------------------------


def obtain_base(cfg: ExperimentConfig, out: Path, log=print) -> Path:
    """Path to the frozen base checkpoint, pretraining it on a cache miss."""
    if cfg.base_checkpoint is not None:
        return Path(cfg.base_checkpoint)
    path = out / "cache" / f"base-{cfg.base_key()}.ckpt"
    if path.is_file():
        log(f"base: cached {path}")
        return path
    mixture = [generate(t) for t in cfg.pretrain.tasks]
    log(f"base: pretraining {cfg.pretrain.optimizer.max_steps} steps on {len(mixture)} tasks")
    model, trace = pretrain_base(cfg.model, mixture, cfg.pretrain.optimizer, seed=cfg.pretrain.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    _write(path.with_suffix(".trace.json"), json.dumps(trace))
    log(f"base: final pretraining loss {trace[-1][1]:.4f}" if trace else "base: no pretraining steps")
    return path


def _job(args):
    base_path, cfg_dict, name, round_index, ckpt_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    base = Model.load(base_path)
    iid, ood = generate(cfg.iid), generate(cfg.ood)
    rnd = sample_round(iid, round_index, cfg.seed)
    result, tuned = run_method_round(
        base, name, cfg.methods[name], iid, ood, rnd, cfg.optimizer,
        checkpoint_dir=ckpt_dir if cfg.checkpoint_every else None, checkpoint_every=cfg.checkpoint_every,
    )
    tuned.save(Path(ckpt_dir) / f"{name}-r{round_index}.ckpt")
    return result


def run_experiment(cfg: ExperimentConfig, out: Path, log=print) -> List[RoundResult]:
    base_path = obtain_base(cfg, out, log)
    base = Model.load(base_path)
    if base.config != cfg.model:
        raise UsageError("base checkpoint model config does not match the experiment config")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(str(base_path), cfg.to_dict(), name, r, str(ckpt_dir)) for r in range(cfg.rounds) for name in cfg.methods]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    for res in results:
        log(f"round {res.round} {res.method:<8} iid={res.iid:.3f} ood={res.ood:.3f} train_loss={res.train_loss:.4f}")

    _write(out / "results.csv", results_csv(results))
    _write(out / "pareto.csv", pareto_csv(results))
    _write(out / "traces.json", json.dumps({f"{r.method}/r{r.round}": r.trace for r in results}, indent=1))
    _write(out / "summary.json", json.dumps(summary_table(results), indent=2, sort_keys=True))
    manifest = {
        "version": version_string(),
        "config": cfg.to_dict(),
        "seeds": {
            "data": cfg.seed,
            "model": cfg.model.seed,
            "pretrain": cfg.pretrain.seed,
            "rounds": {r: sample_round(generate(cfg.iid), r, cfg.seed).seed for r in range(cfg.rounds)},
        },
        "base_checkpoint": str(base_path),
        "base_key": cfg.base_key(),
        "files": ["results.csv", "pareto.csv", "traces.json", "summary.json", "checkpoints/"],
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    _write(out / "config.yaml", dump_config(cfg))
    return results


def pareto_csv(results: Sequence[RoundResult]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {PARETO_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "round", "step", "iid_accuracy", "ood_accuracy"])
    for r in results:
        points = list(r.pareto)
        if not points or points[-1][0] != r.steps:
            points.append((r.steps, r.iid, r.ood))
        for step, iid, ood in points:
            w.writerow([r.method, r.round, step, f"{iid:.6f}", f"{ood:.6f}"])
    return buf.getvalue()


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _out_dir(args.out, cfg.output_dir)
    results = run_experiment(cfg, out)
    for name, row in summary_table(results).items():
        print(f"{name:<8} mean iid={row['iid']:.3f} ood={row['ood']:.3f} train_loss={row['train_loss']:.4f}")
    print(f"wrote {out / 'results.csv'}")
    return 0


# -- diagnose -------------------------------------------------------------


def _load_ckpt(path: str) -> Model:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return Model.load(path)


def diagnose(base: Model, tuned: dict, probe, out: Path, layer: int, head: int, topk: int, normalize: bool = True):
    """Write spectrum CSV/JSON, cka.json and attention maps for every tuned model."""
    n_layers = base.config.n_layers
    if not -n_layers <= layer < n_layers:
        raise UsageError(f"layer {layer} out of range for a {n_layers}-layer model")
    if not 0 <= head < base.config.n_heads:
        raise UsageError(f"head {head} out of range for {base.config.n_heads} heads")
    layer = layer % n_layers
    spectra, ckas = {}, {}
    for tag, model in tuned.items():
        if model.config != base.config:
            raise UsageError(f"{tag}: model config differs from the base checkpoint")
        spectra[tag] = D.bias_spectrum(base, model, probe, layer, topk, normalize)
        try:
            ckas[tag] = D.representation_cka(base, model, probe, layer).to_dict()
        except ValueError as exc:
            ckas[tag] = {"error": str(exc)}
        amap = D.extract_attention_map(model, probe[0].tokens, layer, head)
        _write(out / f"attention-{tag}-L{layer}-H{head}.json", json.dumps(amap.to_dict()))
    amap = D.extract_attention_map(base, probe[0].tokens, layer, head)
    _write(out / f"attention-base-L{layer}-H{head}.json", json.dumps(amap.to_dict()))
    _write(out / "spectrum.csv", D.spectrum_csv(spectra))
    for tag, rep in spectra.items():
        _write(out / f"spectrum-{tag}.csv", D.spectrum_csv({tag: rep}))
    _write(out / "spectrum.json", json.dumps({k: v.to_dict() for k, v in spectra.items()}, indent=1))
    _write(out / "cka.json", json.dumps(ckas, indent=2, sort_keys=True))
    return spectra, ckas


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    base = _load_ckpt(args.base)
    tuned = {}
    for path in args.tuned:
        tag = Path(path).stem
        tuned[tag] = _load_ckpt(path)
    if args.probe:
        if not Path(args.probe).is_file():
            raise UsageError(f"probe dataset not found: {args.probe}")
        probe = load_dataset(args.probe).test
    else:
        probe = generate(cfg.iid).test
    probe = list(probe)[: cfg.diagnose.probe_size]
    if not probe:
        raise UsageError("probe dataset has no test examples")
    out = _out_dir(args.out, str(Path(cfg.output_dir) / "diagnose"))
    layer = cfg.diagnose.layer if args.layer is None else args.layer
    head = cfg.diagnose.head if args.head is None else args.head
    topk = cfg.diagnose.topk if args.topk is None else args.topk
    spectra, ckas = diagnose(base, tuned, probe, out, layer, head, topk, cfg.diagnose.normalize)
    for tag in tuned:
        score = ckas[tag].get("score")
        print(
            f"{tag:<16} participation_ratio={spectra[tag].participation_ratio:.4f} "
            f"top_eig={spectra[tag].eigenvalues[0] if len(spectra[tag].eigenvalues) else 0.0:.4f} "
            f"cka={'n/a' if score is None else f'{score:.6f}'}"
        )
    print(f"wrote {out}")
    return 0


# -- ladder ---------------------------------------------------------------


def cmd_ladder(args) -> int:
    cfg = load_config(args.config) if args.config else None
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    rungs = run_ladder(seed=seed, count=args.instances, fault=args.inject_fault)
    print(format_table(rungs))
    failed = [r for r in rungs if not r.passed]
    if failed:
        out = _out_dir(args.out, str(Path(cfg.output_dir if cfg else ".") / "ladder"))
        path = out / "ladder-failure.json"
        _write(path, json.dumps([r.failure for r in failed], indent=1))
        print(f"{len(failed)} rung(s) failed; failing instance written to {path}", file=sys.stderr)
        return 2
    return 0


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefixlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="pretrain (or reuse) a base and run every method over the few-shot rounds")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--seed", type=int)
    run.set_defaults(fn=cmd_run)

    dg = sub.add_parser("diagnose", help="bias spectrum, CKA and attention maps for tuned checkpoints")
    dg.add_argument("--base", required=True, help="frozen base checkpoint")
    dg.add_argument("--tuned", required=True, action="append", help="tuned checkpoint (repeatable)")
    dg.add_argument("--probe", help="dataset file whose test split is the probe set")
    dg.add_argument("--config")
    dg.add_argument("--out")
    dg.add_argument("--layer", type=int)
    dg.add_argument("--head", type=int)
    dg.add_argument("--topk", type=int)
    dg.set_defaults(fn=cmd_diagnose)

    ld = sub.add_parser("ladder", help="check the chain of attention-form equivalences")
    ld.add_argument("--config")
    ld.add_argument("--out")
    ld.add_argument("--seed", type=int)
    ld.add_argument("--instances", type=int, default=100)
    ld.add_argument("--inject-fault", choices=FAULTS)
    ld.set_defaults(fn=cmd_ladder)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        return args.fn(args)
    except (ConfigError, UsageError, CheckpointError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

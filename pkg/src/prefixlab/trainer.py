"""Few-shot rounds: AdamW fine-tuning of the trainable partition and evaluation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .model import Model, TrainingDiverged, example_loss, _length_groups
from .optim import OptimizerSpec, OptimizerState, adamw_step, clip_global_norm
from .tasks import Dataset, Example, FewShotRound, round_examples

RESULTS_SCHEMA = "prefixlab-results/v1"
RESULTS_COLUMNS = ("method", "round", "split", "accuracy", "steps", "seed")


def round_loss(model: Model, examples: Sequence[Example]) -> float:
    """Mean answer-slot loss over all ``examples`` (no gradient kept)."""
    total, count = 0.0, 0
    for group in _length_groups(examples).values():
        total += example_loss(_inference(model), group).item() * len(group)
        count += len(group)
    return total / count


def _inference(model: Model) -> Model:
    """Same tensors with gradients switched off, so forward passes build no tape."""
    def off(d):
        return {k: T.Tensor(v.data) if v.requires_grad else v for k, v in d.items()}

    return Model(model.config, off(model.params), model.method, off(model.peft))


def train_round(
    model: Model,
    examples: Sequence[Example],
    spec: OptimizerSpec,
    checkpoint_dir: Optional[Path] = None,
    checkpoint_every: int = 0,
    tag: str = "run",
    on_checkpoint=None,
) -> Tuple[Model, List[Tuple[int, float]]]:
    """Fine-tune a copy of ``model`` on ``examples`` for ``spec.max_steps`` steps.

    Batches are taken in order, wrapping around the example list. The trace
    holds ``(step, batch_loss)`` every ``spec.log_every`` steps and at the
    last step. ``on_checkpoint(step, model)`` is called at each checkpoint.
    """
    model = model.copy()
    trace: List[Tuple[int, float]] = []
    if spec.max_steps == 0 or model.method.kind in ("base", "icl") or not model.trainable():
        return model, trace
    examples = list(examples)
    if not examples:
        raise ValueError("a round needs at least one example")
    state = OptimizerState()
    n = len(examples)
    for step in range(spec.max_steps):
        batch = [examples[(step * spec.batch_size + i) % n] for i in range(spec.batch_size)]
        params = model.trainable()
        model.zero_grad()
        try:
            loss = example_loss(model, batch)
            loss.backward()
        except (T.NonFiniteError, FloatingPointError, T.DivisionGuardError) as exc:
            raise TrainingDiverged(f"{tag}: diverged at step {step}: {exc}", trace) from None
        grads = {k: v.grad if v.grad is not None else np.zeros_like(v.data) for k, v in params.items()}
        if spec.grad_clip is not None:
            clip_global_norm(grads, spec.grad_clip)
        adamw_step(params, grads, state, spec)
        done = step + 1
        if step % spec.log_every == 0 or done == spec.max_steps:
            trace.append((step, loss.item()))
        if checkpoint_every and done % checkpoint_every == 0:
            if checkpoint_dir is not None:
                model.save(Path(checkpoint_dir) / f"{tag}-step{done:05d}.ckpt")
            if on_checkpoint is not None:
                on_checkpoint(done, model)
    return model, trace


def icl_context(examples: Sequence[Example], max_tokens: int) -> List[int]:
    """Demonstrations ``tokens + label`` back to back, oldest dropped first to fit."""
    demos: List[int] = []
    for ex in reversed(list(examples)):
        block = list(ex.tokens) + [ex.label]
        if len(block) + len(demos) > max_tokens:
            break
        demos = block + demos
    return demos


def predict(model: Model, examples: Sequence[Example], context: Sequence[int] = ()) -> np.ndarray:
    """Greedy answer token for each example, in input order."""
    inf = _inference(model)
    out = np.zeros(len(examples), dtype=np.int64)
    index = {id(ex): i for i, ex in enumerate(examples)}
    for group in _length_groups(examples).values():
        toks = np.array([list(context) + list(ex.tokens) for ex in group])
        logits = inf.forward(toks).data
        for b, ex in enumerate(group):
            out[index[id(ex)]] = int(np.argmax(logits[b, len(context) + ex.answer_pos]))
    return out


def evaluate(
    model: Model, ds: Dataset, mode: str = "iid", demos: Sequence[Example] = (), examples: Optional[Sequence[Example]] = None
) -> float:
    """Fraction of test examples whose greedy answer equals the gold label.

    ``mode="ood"`` expects a dataset built in the multiple-choice prompt
    format. ``demos`` are prepended as in-context demonstrations.
    """
    if mode not in ("iid", "ood"):
        raise ValueError(f"mode must be iid or ood, got {mode!r}")
    if (mode == "ood") != ds.spec.ood:
        raise ValueError(f"{mode} evaluation on a {'ood' if ds.spec.ood else 'iid'}-format dataset")
    exs = list(ds.test if examples is None else examples)
    if not exs:
        raise ValueError("nothing to evaluate")
    for label in ds.spec.labels:
        if label >= model.config.vocab_size:
            raise ValueError(f"label token {label} missing from vocabulary of size {model.config.vocab_size}")
    longest = max(len(ex.tokens) for ex in exs)
    context = icl_context(demos, model.config.max_len - longest) if demos else []
    preds = predict(model, exs, context)
    gold = np.array([ex.label for ex in exs])
    return float(np.mean(preds == gold))


@dataclass
class RoundResult:
    method: str
    round: int
    iid: float
    ood: float
    steps: int
    seed: int
    train_loss: float
    trace: List[Tuple[int, float]]
    pareto: List[Tuple[int, float, float]]


def run_method_round(
    base: Model,
    name: str,
    method,
    iid: Dataset,
    ood: Dataset,
    rnd: FewShotRound,
    spec: OptimizerSpec,
    checkpoint_dir: Optional[Path] = None,
    checkpoint_every: int = 0,
) -> Tuple[RoundResult, Model]:
    examples = round_examples(iid, rnd)
    model = base.with_method(method, seed=rnd.seed * 1000 + rnd.index)
    pareto: List[Tuple[int, float, float]] = []

    def on_ckpt(step, m):
        pareto.append((step, evaluate(m, iid, "iid"), evaluate(m, ood, "ood")))

    tuned, trace = train_round(
        model, examples, spec, checkpoint_dir, checkpoint_every, tag=f"{name}-r{rnd.index}", on_checkpoint=on_ckpt
    )
    demos = examples if method.kind == "icl" else ()
    iid_acc = evaluate(tuned, iid, "iid", demos=demos)
    ood_acc = evaluate(tuned, ood, "ood")
    steps = 0 if method.kind in ("base", "icl") else spec.max_steps
    result = RoundResult(name, rnd.index, iid_acc, ood_acc, steps, rnd.seed, round_loss(tuned, examples), trace, pareto)
    return result, tuned


def results_rows(results: Sequence[RoundResult]) -> List[dict]:
    rows = []
    for r in results:
        for split, acc in (("iid", r.iid), ("ood", r.ood)):
            rows.append({"method": r.method, "round": r.round, "split": split, "accuracy": f"{acc:.6f}", "steps": r.steps, "seed": r.seed})
    return rows


def results_csv(results: Sequence[RoundResult]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {RESULTS_SCHEMA}\n")
    writer = csv.DictWriter(buf, fieldnames=RESULTS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(results_rows(results))
    return buf.getvalue()


def summary_table(results: Sequence[RoundResult]) -> Dict[str, Dict[str, float]]:
    """Per-method mean IID/OOD accuracy and mean final training loss."""
    out: Dict[str, Dict[str, float]] = {}
    for name in dict.fromkeys(r.method for r in results):
        rs = [r for r in results if r.method == name]
        out[name] = {
            "iid": float(np.mean([r.iid for r in rs])),
            "ood": float(np.mean([r.ood for r in rs])),
            "train_loss": float(np.mean([r.train_loss for r in rs])),
            "rounds": len(rs),
        }
    return out

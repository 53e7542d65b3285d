"""Experiment configuration: one YAML file describing model, tasks, methods and optimizer."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import yaml

from .model import MethodSpec, ModelConfig
from .optim import OptimizerSpec
from .tasks import TaskSpec, check_disjoint


class ConfigError(ValueError):
    pass


def default_pretrain_tasks() -> List[TaskSpec]:
    """Marked copy and key-value tasks plus the multiple-choice OOD format."""
    return [
        TaskSpec("pre-copy", 6, 16, generator="copy", train_per_class=300, label_offset=0, keys_per_class=2, marker=0),
        TaskSpec("pre-kv", 6, 16, generator="key-value-recall", train_per_class=300, label_offset=6, keys_per_class=2, marker=1),
        default_ood_task(),
    ]


def default_iid_task() -> TaskSpec:
    # same key layout as pre-kv but without the marker the base was trained with
    return TaskSpec("kv6", 6, 16, generator="key-value-recall", train_per_class=8, label_offset=6, keys_per_class=2)


def default_ood_task() -> TaskSpec:
    return TaskSpec("mc4", 4, 12, generator="key-value-recall", train_per_class=300, label_offset=20, ood=True, test_size=200)


def default_methods() -> Dict[str, MethodSpec]:
    return {
        "prefix": MethodSpec("prefix", prefix_len=8),
        "ptplus": MethodSpec("ptplus"),
        "lora": MethodSpec("lora", lora_rank=4),
        "icl": MethodSpec("icl"),
    }


@dataclass
class PretrainConfig:
    tasks: List[TaskSpec] = field(default_factory=default_pretrain_tasks)
    optimizer: OptimizerSpec = field(
        default_factory=lambda: OptimizerSpec(lr=3e-3, weight_decay=0.0, max_steps=6000, batch_size=16, log_every=50)
    )
    seed: int = 0

    def to_dict(self) -> dict:
        return {"tasks": [t.to_dict() for t in self.tasks], "optimizer": self.optimizer.to_dict(), "seed": self.seed}


@dataclass
class DiagnoseConfig:
    probe_size: int = 64
    topk: int = 50
    layer: int = -1
    head: int = 0
    normalize: bool = True

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(max_len=128))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    iid: TaskSpec = field(default_factory=default_iid_task)
    ood: TaskSpec = field(default_factory=default_ood_task)
    methods: Dict[str, MethodSpec] = field(default_factory=default_methods)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    rounds: int = 5
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 0
    workers: int = 1
    base_checkpoint: Optional[str] = None
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("method list is empty")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.iid.ood or not self.ood.ood:
            raise ConfigError("iid task must be plain and ood task must use the multiple-choice format")
        if self.iid.train_per_class < 1:
            raise ConfigError("train pool must hold at least one example per class")
        try:
            check_disjoint(self.iid, self.ood)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        longest = max(t.seq_len for t in [self.iid, self.ood, *self.pretrain.tasks])
        if longest > self.model.max_len:
            raise ConfigError(f"task length {longest} exceeds model max_len {self.model.max_len}")
        for t in [self.iid, self.ood, *self.pretrain.tasks]:
            if t.vocab_size != self.model.vocab_size:
                raise ConfigError(f"task {t.name!r} vocab {t.vocab_size} != model vocab {self.model.vocab_size}")
        if self.base_checkpoint is not None and not Path(self.base_checkpoint).is_file():
            raise ConfigError(f"base checkpoint not found: {self.base_checkpoint}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "iid": self.iid.to_dict(),
            "ood": self.ood.to_dict(),
            "methods": {k: v.to_dict() for k, v in self.methods.items()},
            "optimizer": self.optimizer.to_dict(),
            "rounds": self.rounds,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "workers": self.workers,
            "base_checkpoint": self.base_checkpoint,
            "diagnose": self.diagnose.to_dict(),
        }

    def base_key(self) -> str:
        """Cache key for the pretrained base: model config, pretraining tasks and seed."""
        blob = json.dumps({"model": self.model.to_dict(), "pretrain": self.pretrain.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        d = dict(d or {})
        known = {
            "model", "pretrain", "iid", "ood", "methods", "optimizer", "rounds", "seed",
            "output_dir", "checkpoint_every", "workers", "base_checkpoint", "diagnose",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            if "model" in d:
                kw["model"] = ModelConfig(**{"max_len": 128, **d["model"]})
            if "pretrain" in d:
                p = d["pretrain"] or {}
                pk = {}
                if "tasks" in p:
                    pk["tasks"] = [TaskSpec.from_dict(t) for t in p["tasks"]]
                if "optimizer" in p:
                    pk["optimizer"] = _optimizer(p["optimizer"], PretrainConfig().optimizer)
                if "seed" in p:
                    pk["seed"] = int(p["seed"])
                kw["pretrain"] = PretrainConfig(**pk)
            for split in ("iid", "ood"):
                if split in d:
                    kw[split] = TaskSpec.from_dict(d[split])
            if "methods" in d:
                kw["methods"] = _methods(d["methods"])
            if "optimizer" in d:
                kw["optimizer"] = _optimizer(d["optimizer"], OptimizerSpec())
            if "diagnose" in d:
                kw["diagnose"] = DiagnoseConfig(**d["diagnose"])
            for key in ("rounds", "seed", "checkpoint_every", "workers"):
                if key in d:
                    kw[key] = int(d[key])
            for key in ("output_dir", "base_checkpoint"):
                if key in d:
                    kw[key] = None if d[key] is None else str(d[key])
            return cls(**kw)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _optimizer(d, default: OptimizerSpec) -> OptimizerSpec:
    if isinstance(d, str):
        return OptimizerSpec.preset(d)
    d = dict(d)
    base = OptimizerSpec.preset(d.pop("preset")) if "preset" in d else default
    return base.with_(**d)


def _methods(d) -> Dict[str, MethodSpec]:
    # accepts a mapping name -> fields or a list of {name, kind, ...}
    out: Dict[str, MethodSpec] = {}
    items: List[Tuple[str, dict]]
    if isinstance(d, dict):
        items = [(k, dict(v or {})) for k, v in d.items()]
    else:
        items = []
        for entry in d:
            entry = dict(entry)
            items.append((entry.pop("name", entry.get("kind")), entry))
    for name, fields in items:
        fields.setdefault("kind", name)
        out[str(name)] = MethodSpec.from_dict(fields)
    return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

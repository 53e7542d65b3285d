"""Synthetic generative-classification tasks.

Token layout for a vocabulary of size ``V``::

    0 SEP   answer slot: the label is the next token
    1 OPT   start of a multiple-choice label list
    2 QRY   end of the label list, query follows
    3 CUE   marks the key in key-value-recall
    4..7    task markers (optional first token naming the task)
    8 .. V-label_slots-1   content tokens
    V-label_slots .. V-1   label tokens (reserved, contiguous)

Each task owns ``n_classes`` consecutive label tokens starting at
``label_offset`` inside the reserved range, so IID and OOD tasks can be kept
disjoint by giving them non-overlapping offsets.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

SEP, OPT, QRY, CUE = 0, 1, 2, 3
MARKERS = (4, 5, 6, 7)
N_SPECIAL = 8
GENERATORS = ("copy", "pattern-classification", "key-value-recall")
FORMAT_NAME = "prefixlab-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_classes: int
    seq_len: int = 16
    vocab_size: int = 64
    generator: str = "pattern-classification"
    seed: int = 0
    train_per_class: int = 8
    test_size: int = 256
    label_offset: int = 0
    label_slots: int = 24
    ood: bool = False
    keys_per_class: Optional[int] = None
    marker: Optional[int] = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("a task needs at least two classes")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.label_offset < 0 or self.label_offset + self.n_classes > self.label_slots:
            raise ValueError("task labels fall outside the reserved label range")
        if self.marker is not None and not 0 <= self.marker < len(MARKERS):
            raise ValueError(f"marker must index one of {len(MARKERS)} marker tokens")
        if self.seq_len < 3 + (self.marker is not None):
            raise ValueError("sequence too short for the body, SEP and marker")
        need = {"copy": self.n_classes, "pattern-classification": self.n_classes + 2,
                "key-value-recall": self.n_classes}[self.generator]
        if self.keys_per_class is not None:
            if self.keys_per_class < 1:
                raise ValueError("keys_per_class must be >= 1")
            need = max(need, self.n_classes * self.keys_per_class)
        if self.n_content < need:
            raise ValueError(f"vocab too small: {self.n_content} content tokens, {need} needed")

    @property
    def label_base(self) -> int:
        return self.vocab_size - self.label_slots

    @property
    def n_content(self) -> int:
        return self.label_base - N_SPECIAL

    @property
    def labels(self) -> List[int]:
        start = self.label_base + self.label_offset
        return list(range(start, start + self.n_classes))

    @property
    def test_per_class(self) -> int:
        return max(1, self.test_size // self.n_classes)

    def long_variant(self, factor: int = 4) -> "TaskSpec":
        """Same task with inputs ``factor`` times longer."""
        return replace(self, name=f"{self.name}-long", seq_len=self.seq_len * factor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass(frozen=True)
class Example:
    """``tokens`` ends with SEP; the label is the next token after ``answer_pos``."""

    tokens: Tuple[int, ...]
    label: int
    answer_pos: int

    @property
    def loss_mask(self) -> np.ndarray:
        m = np.zeros(len(self.tokens), dtype=bool)
        m[self.answer_pos] = True
        return m


@dataclass
class Dataset:
    spec: TaskSpec
    train: List[Example] = field(default_factory=list)
    test: List[Example] = field(default_factory=list)

    def class_of(self, ex: Example) -> int:
        return self.spec.labels.index(ex.label)

    def __eq__(self, other):
        return isinstance(other, Dataset) and (self.spec, self.train, self.test) == (other.spec, other.train, other.test)


@dataclass(frozen=True)
class FewShotRound:
    index: int
    example_ids: Tuple[int, ...]
    seed: int


# -- generators -----------------------------------------------------------


def _rng(spec: TaskSpec, stream: str) -> np.random.Generator:
    salt = zlib.crc32(f"{spec.name}/{spec.generator}/{stream}".encode())
    return np.random.default_rng([spec.seed, salt])


def _layout(spec: TaskSpec) -> Dict[str, np.ndarray]:
    """Seeded assignment of content tokens to classes (motifs / key groups)."""
    content = np.arange(N_SPECIAL, spec.label_base)
    # keyed on the generator geometry only, so tasks that differ just in name
    # or label range share the same token-to-class layout
    salt = zlib.crc32(f"{spec.n_classes}/{spec.vocab_size}/{spec.label_slots}".encode())
    perm = np.random.default_rng([spec.seed, salt]).permutation(content)
    C = spec.n_classes
    if spec.generator == "pattern-classification":
        return {"motif": perm[:C], "noise": perm[C:]}
    keys = perm if spec.keys_per_class is None else perm[: C * spec.keys_per_class]
    groups = np.array([keys[i::C] for i in range(C)], dtype=object)
    owner = np.zeros(spec.vocab_size, dtype=int) - 1
    for c in range(C):
        owner[np.asarray(groups[c], dtype=int)] = c
    return {"groups": groups, "owner": owner, "content": content}


def _sample_query(spec: TaskSpec, layout, cls: int, rng: np.random.Generator) -> List[int]:
    """Body tokens (without SEP or marker) whose label is class ``cls``."""
    n = spec.seq_len - 1 - (spec.marker is not None)
    if spec.generator == "copy":
        body = list(rng.choice(layout["content"], size=n))
        body[0] = int(rng.choice(np.asarray(layout["groups"][cls], dtype=int)))
    elif spec.generator == "pattern-classification":
        body = list(rng.choice(layout["noise"], size=n))
        body[int(rng.integers(n))] = int(layout["motif"][cls])
    else:
        body = list(rng.choice(layout["content"], size=n))
        pos = int(rng.integers(n - 1))
        body[pos] = CUE
        body[pos + 1] = int(rng.choice(np.asarray(layout["groups"][cls], dtype=int)))
    return [int(t) for t in body]


def _make_example(spec: TaskSpec, body: List[int], cls: int) -> Example:
    label = spec.labels[cls]
    if spec.marker is not None:
        body = [MARKERS[spec.marker]] + list(body)
    if spec.ood:
        return make_ood_prompt(body, label, spec.labels)
    tokens = tuple(body) + (SEP,)
    return Example(tokens, label, len(tokens) - 1)


def generate(spec: TaskSpec) -> Dataset:
    """Deterministic train pool (``train_per_class`` per class) and class-balanced test split."""
    layout = _layout(spec)
    ds = Dataset(spec)
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        rng = _rng(spec, split)
        order = np.tile(np.arange(spec.n_classes), per_class)
        out = ds.train if split == "train" else ds.test
        for cls in order:
            out.append(_make_example(spec, _sample_query(spec, layout, int(cls), rng), int(cls)))
    return ds


def reference_classifier(spec: TaskSpec) -> Callable[[Sequence[int]], int]:
    """Closed-form rule that labels every generated example correctly."""
    layout = _layout(spec)

    def body_of(tokens: Sequence[int]) -> List[int]:
        tokens = list(tokens)
        if spec.ood:
            tokens = tokens[tokens.index(QRY) + 1 :]
        tokens = tokens[:-1]
        return tokens[1:] if spec.marker is not None else tokens

    def classify(tokens: Sequence[int]) -> int:
        body = body_of(tokens)
        if spec.generator == "copy":
            cls = layout["owner"][body[0]]
        elif spec.generator == "pattern-classification":
            motif = list(layout["motif"])
            counts = [sum(t == m for t in body) for m in motif]
            cls = int(np.argmax(counts))
        else:
            cls = layout["owner"][body[body.index(CUE) + 1]]
        return spec.labels[int(cls)]

    return classify


# -- rounds and prompts ---------------------------------------------------


def sample_round(ds: Dataset, index: int, seed: int) -> FewShotRound:
    """One example per class drawn with a generator keyed on (seed, index)."""
    rng = np.random.default_rng([int(seed), int(index)])
    ids = []
    for cls, label in enumerate(ds.spec.labels):
        pool = [i for i, ex in enumerate(ds.train) if ex.label == label]
        if not pool:
            raise ValueError(f"class {cls} has no examples in the train pool")
        ids.append(int(pool[int(rng.integers(len(pool)))]))
    return FewShotRound(int(index), tuple(ids), int(seed))


def round_examples(ds: Dataset, rnd: FewShotRound) -> List[Example]:
    return [ds.train[i] for i in rnd.example_ids]


def make_ood_prompt(body: Sequence[int], label: int, label_list: Sequence[int], iid_labels: Sequence[int] = ()) -> Example:
    """``OPT l_1 .. l_C QRY body SEP`` with the answer read after SEP."""
    label_list = [int(x) for x in label_list]
    clash = set(label_list) & {int(x) for x in iid_labels}
    if clash:
        raise ValueError(f"OOD labels collide with IID labels: {sorted(clash)}")
    if label not in label_list:
        raise ValueError("gold label missing from the label list")
    tokens = (OPT, *label_list, QRY, *[int(t) for t in body], SEP)
    return Example(tuple(tokens), int(label), len(tokens) - 1)


def check_disjoint(iid: TaskSpec, ood: TaskSpec) -> None:
    clash = set(iid.labels) & set(ood.labels)
    if clash:
        raise ValueError(f"IID and OOD label ranges overlap: {sorted(clash)}")


# -- persistence ----------------------------------------------------------


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def dumps(ds: Dataset) -> str:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "spec": ds.spec.to_dict(),
              "n_train": len(ds.train), "n_test": len(ds.test)}
    lines = [_dump_line(header)]
    for split, exs in (("train", ds.train), ("test", ds.test)):
        for ex in exs:
            lines.append(_dump_line({"split": split, "tokens": list(ex.tokens), "label": ex.label, "mask": ex.answer_pos}))
    return "\n".join(lines) + "\n"


def persist(ds: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(ds))
    return path


def loads(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("line 1: missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: malformed header ({exc.msg})") from None
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("line 1: not a prefixlab dataset")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: version mismatch ({header.get('version')} != {FORMAT_VERSION})")
    ds = Dataset(TaskSpec.from_dict(header["spec"]))
    expected = header["n_train"] + header["n_test"]
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            ex = Example(tuple(int(t) for t in rec["tokens"]), int(rec["label"]), int(rec["mask"]))
            split = rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {lineno}: malformed record ({exc})") from None
        if not 0 <= ex.answer_pos < len(ex.tokens):
            raise DatasetFormatError(f"line {lineno}: mask index out of range")
        if split not in ("train", "test"):
            raise DatasetFormatError(f"line {lineno}: unknown split {split!r}")
        (ds.train if split == "train" else ds.test).append(ex)
    got = len(ds.train) + len(ds.test)
    if got != expected or len(ds.train) != header["n_train"]:
        raise DatasetFormatError(f"line {got + 2}: file truncated, expected {expected} records, found {got}")
    return ds


def load(path) -> Dataset:
    return loads(Path(path).read_text())

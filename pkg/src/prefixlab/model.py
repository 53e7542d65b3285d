"""A small pre-norm decoder-only transformer that hosts every PEFT variant.

Block structure per layer::

    x = x + MHA(rms_norm(x))          # PEFT hooks live inside MHA
    x = x + FFN(rms_norm(x))          # W2 elu(W1 h + b1) + b2

Parameters live in two flat dicts: ``params`` (the base model) and ``peft``
(method-specific tensors). Trainability is carried by ``requires_grad``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .attention import AttentionConfig, AttentionWeights, attend, multi_head_forward
from .peft import (
    FeatureMapSpec,
    LoraParams,
    feature_map_eval,
    hybrid_attend,
    lora_apply,
    mn_attend,
    mn_from_kv,
    prefix_attend,
    ptplus_attend,
)
from .tensor import Tensor

METHODS = ("base", "full", "icl", "prefix", "mn", "ptplus", "hybrid", "lora")
PREFIX_METHODS = ("prefix",)


@dataclass(frozen=True)
class MethodSpec:
    """Which adaptation to apply and its knobs.

    ``layers`` restricts prefix/M/LoRA parameters to a subset of layers; the
    default ``None`` means every layer.
    """

    kind: str = "base"
    prefix_len: int = 8
    lora_rank: int = 4
    lora_targets: Tuple[str, ...] = ("W_Q", "W_V")
    phi: str = "elu-plus-one"
    d_phi: Optional[int] = None
    phi_trainable: bool = False
    prefix_scale: float = 0.02
    lam: float = 0.5
    layers: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.kind not in METHODS:
            raise ValueError(f"unknown method {self.kind!r}; expected one of {METHODS}")
        if self.prefix_len < 0 or self.lora_rank < 1:
            raise ValueError("prefix_len must be >= 0 and lora_rank >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.kind == "mn" and self.phi == "relu-affine":
            raise ValueError("the mn ratio branch needs a positive feature map")
        if self.kind == "mn" and self.prefix_len < 1:
            raise ValueError("the mn method seeds M and N from a prefix of length >= 1")
        object.__setattr__(self, "lora_targets", tuple(self.lora_targets))
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(self.layers))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        d["layers"] = None if self.layers is None else list(self.layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodSpec":
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    n_kv_heads: Optional[int] = None
    d_head: int = 8
    ffn_width: int = 64
    max_len: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.ffn_width < self.d_model:
            raise ValueError("ffn_width must be >= d_model")
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        self.attention  # validates head geometry

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.d_head, self.d_head, self.n_heads, self.n_kv_heads, causal=True)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def init_params(cfg: ModelConfig, seed: Optional[int] = None) -> Dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, f, V = cfg.d_model, cfg.ffn_width, cfg.vocab_size
    a = cfg.attention

    def w(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    p = {"tok_emb": w((V, d), 1.0), "pos_emb": w((cfg.max_len, d), 0.1)}
    for l in range(cfg.n_layers):
        pre = f"L{l}."
        p[pre + "norm1"] = ones(d)
        for h in range(a.n_heads):
            p[f"{pre}attn.W_Q.{h}"] = w((d, a.d_k), 1.0 / math.sqrt(d))
        for g in range(a.n_kv_heads):
            p[f"{pre}attn.W_K.{g}"] = w((d, a.d_k), 1.0 / math.sqrt(d))
            p[f"{pre}attn.W_V.{g}"] = w((d, a.d_v), 1.0 / math.sqrt(d))
        p[pre + "attn.W_O"] = w((a.n_heads * a.d_v, d), 1.0 / math.sqrt(a.n_heads * a.d_v * cfg.n_layers))
        p[pre + "norm2"] = ones(d)
        p[pre + "ffn.W1"] = w((d, f), 1.0 / math.sqrt(d))
        p[pre + "ffn.b1"] = zeros(f)
        p[pre + "ffn.W2"] = w((f, d), 1.0 / math.sqrt(f * cfg.n_layers))
        p[pre + "ffn.b2"] = zeros(d)
    p["norm_f"] = ones(d)
    p["W_out"] = w((d, V), 1.0 / math.sqrt(d))
    return p


class Model:
    """Base weights plus one attached adaptation method."""

    def __init__(
        self,
        config: ModelConfig,
        params: Dict[str, Tensor],
        method: MethodSpec = MethodSpec(),
        peft: Optional[Dict[str, Tensor]] = None,
    ):
        self.config = config
        self.params = params
        self.method = method
        self.peft = peft or {}

    @classmethod
    def init(cls, config: ModelConfig) -> "Model":
        return cls(config, init_params(config))

    # -- partition --------------------------------------------------------

    def all_tensors(self) -> Dict[str, Tensor]:
        out = dict(self.params)
        out.update({"peft." + k: v for k, v in self.peft.items()})
        return out

    def trainable(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.all_tensors().items() if v.requires_grad}

    def frozen(self) -> Dict[str, Tensor]:
        return {k: v for k, v in self.all_tensors().items() if not v.requires_grad}

    def n_trainable(self) -> int:
        return int(sum(t.size for t in self.trainable().values()))

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            t = self.params[name]
            if not t.requires_grad:
                h.update(name.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        def cp(d):
            return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in d.items()}

        return Model(self.config, cp(self.params), self.method, cp(self.peft))

    def zero_grad(self) -> None:
        for t in self.all_tensors().values():
            t.grad = None

    def with_method(self, method: MethodSpec, seed: int = 0) -> "Model":
        """Fresh copy of the base weights with ``method`` attached.

        Base weights are frozen for every method except ``full``; method
        parameters are initialised so the adapted model starts equal to the
        base (zero ``M``, zero LoRA ``B``), except the prefix, which is small
        Gaussian.
        """
        m = Model(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()}, method)
        for t in m.params.values():
            t.requires_grad = method.kind == "full"
        m.peft = init_method_params(self.config, method, seed, m.params)
        return m

    # -- views ------------------------------------------------------------

    def layers_with_method(self) -> List[int]:
        if self.method.layers is None:
            return list(range(self.config.n_layers))
        return [l for l in self.method.layers if 0 <= l < self.config.n_layers]

    def attention_weights(self, layer: int) -> AttentionWeights:
        a = self.config.attention
        p, pre = self.params, f"L{layer}.attn."
        return AttentionWeights(
            W_Q=[p[f"{pre}W_Q.{h}"] for h in range(a.n_heads)],
            W_K=[p[f"{pre}W_K.{g}"] for g in range(a.n_kv_heads)],
            W_V=[p[f"{pre}W_V.{g}"] for g in range(a.n_kv_heads)],
            W_O=p[pre + "W_O"],
            frozen=not p[pre + "W_O"].requires_grad,
        )

    def feature_map(self, layer: int, head: int) -> FeatureMapSpec:
        key = f"L{layer}.h{head}.phi"
        if self.method.phi == "relu-affine":
            return FeatureMapSpec("relu-affine", self.peft[key + ".W"], self.peft[key + ".b"], self.method.phi_trainable)
        return FeatureMapSpec(self.method.phi)

    def lora_params(self, layer: int) -> LoraParams:
        a = self.config.attention
        factors = {}
        for name in self.method.lora_targets:
            count = a.n_heads if name == "W_Q" else a.n_kv_heads
            factors[name] = [
                (self.peft[f"L{layer}.lora.{name}.{i}.A"], self.peft[f"L{layer}.lora.{name}.{i}.B"]) for i in range(count)
            ]
        return LoraParams(self.method.lora_rank, factors)

    # -- forward ----------------------------------------------------------

    def head_fn(self, layer: int, w: AttentionWeights, record: Optional[dict] = None):
        kind = self.method.kind
        a = self.config.attention
        active = layer in self.layers_with_method()
        prefix_kv = {}

        def fn(h, q, k, v):
            pk = None
            if active and kind == "prefix" and self.method.prefix_len > 0:
                g = a.kv_index(h)
                if g not in prefix_kv:
                    S = self.peft[f"L{layer}.prefix.S"]
                    prefix_kv[g] = (S @ w.W_K[g], S @ w.W_V[g])
                pk, pv = prefix_kv[g]
                out = prefix_attend(q, k, v, pk, pv)
            elif active and kind == "ptplus":
                out = ptplus_attend(q, k, v, self.peft[f"L{layer}.h{h}.M"], self.feature_map(layer, h))
            elif active and kind == "mn":
                M, N = self.peft[f"L{layer}.h{h}.M"], self.peft[f"L{layer}.h{h}.N"]
                out = mn_attend(q, k, v, M, N, self.method.lam, self.feature_map(layer, h))
            elif active and kind == "hybrid":
                out = hybrid_attend(
                    q, k, v, self.peft[f"L{layer}.h{h}.M"], self.peft[f"L{layer}.h{h}.N"], self.feature_map(layer, h)
                )
            else:
                out = attend(q, k, v)
            if record is not None:
                record.setdefault("qk", {})[(layer, h)] = (q.data, k.data, None if pk is None else pk.data)
            return out

        return fn

    def forward(self, tokens, record: Optional[dict] = None) -> Tensor:
        """Causal next-token logits for ``tokens`` of shape (n,) or (B, n)."""
        cfg, p = self.config, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim not in (1, 2):
            raise ValueError("tokens must be a sequence or a batch of sequences")
        n = tokens.shape[-1]
        if n < 1:
            raise ValueError("empty token sequence")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise IndexError(f"token index out of range [0, {cfg.vocab_size})")
        if n > cfg.max_len:
            raise IndexError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        x = p["tok_emb"][tokens] + p["pos_emb"][:n]
        a = cfg.attention
        for l in range(cfg.n_layers):
            pre = f"L{l}."
            w = self.attention_weights(l)
            if self.method.kind == "lora" and l in self.layers_with_method():
                w = lora_apply(w, self.lora_params(l))
            h = T.rms_norm(x, p[pre + "norm1"])
            attn = multi_head_forward(h, w, a, self.head_fn(l, w, record))
            if record is not None:
                record.setdefault("attn_out", []).append(attn.data)
            x = x + attn
            h = T.rms_norm(x, p[pre + "norm2"])
            ff = T.elu(h @ p[pre + "ffn.W1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.W2"] + p[pre + "ffn.b2"]
            x = x + ff
            if record is not None:
                record.setdefault("hidden", []).append(x.data)
        return T.rms_norm(x, p["norm_f"]) @ p["W_out"]

    __call__ = forward

    # -- persistence ------------------------------------------------------

    def meta(self) -> dict:
        return {"model": self.config.to_dict(), "method": self.method.to_dict()}

    def save(self, path) -> None:
        arrays = {k: v.data for k, v in self.params.items()}
        arrays.update({"peft." + k: v.data for k, v in self.peft.items()})
        meta = self.meta()
        meta["trainable"] = sorted(self.trainable())
        checkpoint.save(path, arrays, self.method.kind, meta)

    @classmethod
    def load(cls, path) -> "Model":
        arrays, _, meta = checkpoint.load(path)
        cfg = ModelConfig.from_dict(meta["model"])
        method = MethodSpec.from_dict(meta["method"])
        trainable = set(meta.get("trainable", []))
        params, peft = {}, {}
        for k, arr in arrays.items():
            t = Tensor(arr, requires_grad=k in trainable)
            if k.startswith("peft."):
                peft[k[5:]] = t
            else:
                params[k] = t
        return cls(cfg, params, method, peft)


def init_method_params(
    cfg: ModelConfig, method: MethodSpec, seed: int = 0, base: Optional[Dict[str, Tensor]] = None
) -> Dict[str, Tensor]:
    """Method tensors for every adapted layer.

    ``mn`` needs the ``base`` weights: its M and N start as the kernel summary
    of a small random prefix, so the model starts at the kernel-prefix form.
    """
    rng = np.random.default_rng([int(seed), 7919])
    a = cfg.attention
    layers = range(cfg.n_layers) if method.layers is None else [l for l in method.layers if 0 <= l < cfg.n_layers]
    d_phi = method.d_phi or a.d_k
    if method.phi != "relu-affine" and d_phi != a.d_k:
        raise ValueError("elu feature maps keep width d_k; d_phi only applies to relu-affine")
    out: Dict[str, Tensor] = {}
    for l in layers:
        if method.kind == "prefix":
            out[f"L{l}.prefix.S"] = Tensor(rng.normal(0.0, method.prefix_scale, size=(method.prefix_len, cfg.d_model)), requires_grad=True)
        elif method.kind == "mn":
            if base is None:
                raise ValueError("mn initialisation needs the base weights")
            S = Tensor(rng.normal(0.0, method.prefix_scale, size=(method.prefix_len, cfg.d_model)))
            for h in range(a.n_heads):
                g = a.kv_index(h)
                pk = S @ base[f"L{l}.attn.W_K.{g}"]
                pv = S @ base[f"L{l}.attn.W_V.{g}"]
                M, N = mn_from_kv(pk, pv, FeatureMapSpec(method.phi), a.d_k)
                out[f"L{l}.h{h}.M"] = Tensor(M.data.copy(), requires_grad=True)
                out[f"L{l}.h{h}.N"] = Tensor(N.data.copy(), requires_grad=True)
        elif method.kind in ("ptplus", "hybrid"):
            for h in range(a.n_heads):
                out[f"L{l}.h{h}.M"] = Tensor(np.zeros((d_phi, a.d_v)), requires_grad=True)
                if method.kind == "hybrid":
                    out[f"L{l}.h{h}.N"] = Tensor(np.zeros(d_phi), requires_grad=True)
                if method.phi == "relu-affine":
                    out[f"L{l}.h{h}.phi.W"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(a.d_k), size=(d_phi, a.d_k)), requires_grad=method.phi_trainable)
                    out[f"L{l}.h{h}.phi.b"] = Tensor(rng.normal(0.0, 0.1, size=(d_phi,)), requires_grad=method.phi_trainable)
        elif method.kind == "lora":
            for name in method.lora_targets:
                count = a.n_heads if name == "W_Q" else a.n_kv_heads
                d_out = a.d_v if name == "W_V" else a.d_k
                if method.lora_rank > min(cfg.d_model, d_out):
                    raise ValueError(f"LoRA rank {method.lora_rank} exceeds min({cfg.d_model}, {d_out})")
                for i in range(count):
                    out[f"L{l}.lora.{name}.{i}.A"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), size=(cfg.d_model, method.lora_rank)), requires_grad=True)
                    out[f"L{l}.lora.{name}.{i}.B"] = Tensor(np.zeros((method.lora_rank, d_out)), requires_grad=True)
    return out


# -- loss -----------------------------------------------------------------


def loss_next_token(logits: Tensor, targets, loss_mask) -> Tensor:
    """Mean cross-entropy over the positions selected by ``loss_mask``."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if mask.shape != logits.shape[:-1] or targets.shape != mask.shape:
        raise ValueError("targets/mask must match the logits' leading shape")
    idx = np.nonzero(mask)
    if len(idx[0]) == 0:
        raise ValueError("loss mask selects no positions")
    picked = logits[idx]
    logp = T.log_softmax_rows(picked)
    chosen = logp[(np.arange(len(idx[0])), targets[idx])]
    return T.scale(T.sum(chosen), -1.0 / len(idx[0]))


def example_loss(model: Model, examples, prefix_tokens: Sequence[int] = ()) -> Tensor:
    """Mean answer-slot loss over equal-length examples, run as one batch."""
    toks = np.array([list(prefix_tokens) + list(ex.tokens) for ex in examples])
    off = len(prefix_tokens)
    targets = np.zeros(toks.shape, dtype=np.int64)
    mask = np.zeros(toks.shape, dtype=bool)
    for b, ex in enumerate(examples):
        targets[b, off + ex.answer_pos] = ex.label
        mask[b, off + ex.answer_pos] = True
    return loss_next_token(model.forward(toks), targets, mask)


# -- base pretraining -----------------------------------------------------


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, trace: list):
        super().__init__(msg)
        self.trace = trace


def _length_groups(examples) -> Dict[int, list]:
    groups: Dict[int, list] = {}
    for ex in examples:
        groups.setdefault(len(ex.tokens), []).append(ex)
    return {k: groups[k] for k in sorted(groups)}


def pretrain_base(
    cfg: ModelConfig,
    mixture: Sequence,
    spec=None,
    seed: int = 0,
    log_every: int = 50,
) -> Tuple[Model, List[Tuple[int, float]]]:
    """Train every weight on the pooled train splits of ``mixture``, then freeze.

    Batches are drawn from one sequence-length group at a time with a
    generator seeded by ``seed``. Returns the frozen model and the loss trace.
    """
    from .optim import OptimizerSpec, OptimizerState, adamw_step

    spec = spec or OptimizerSpec(lr=3e-3, weight_decay=0.0, max_steps=1500, batch_size=16)
    model = Model.init(cfg)
    groups = list(_length_groups([ex for ds in mixture for ex in ds.train]).values())
    rng = np.random.default_rng([int(seed), 104729])
    state = OptimizerState()
    trace: List[Tuple[int, float]] = []
    weights = np.array([len(g) for g in groups], dtype=float)
    weights /= weights.sum() if len(weights) else 1.0
    for step in range(spec.max_steps):
        group = groups[int(rng.choice(len(groups), p=weights))]
        batch = [group[int(i)] for i in rng.integers(len(group), size=spec.batch_size)]
        params = model.trainable()
        try:
            loss = example_loss(model, batch)
            model.zero_grad()
            loss.backward()
        except (T.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(f"pretraining diverged at step {step}: {exc}", trace) from None
        if step % log_every == 0 or step == spec.max_steps - 1:
            trace.append((step, loss.item()))
        adamw_step(params, {k: v.grad for k, v in params.items()}, state, spec)
    for t in model.params.values():
        t.requires_grad = False
    return model, trace

"""Causal single-head, multi-head and grouped-query attention.

Two single-head evaluations are provided. :func:`attn_matrix_form` is the
softmax-over-scores form used by the model. :func:`attn_token_form` evaluates
each output token as a similarity-weighted mean of the visible values and
exists mainly as an independent cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    d_k: int
    d_v: int
    n_heads: int = 1
    n_kv_heads: Optional[int] = None
    causal: bool = True

    def __post_init__(self):
        if self.n_kv_heads is None:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        for name in ("d_model", "d_k", "d_v", "n_heads", "n_kv_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_heads must be a multiple of n_kv_heads")

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def kv_index(self, head: int) -> int:
        """Contiguous grouping: query head h reads KV head h // group_size."""
        return head // self.group_size


@dataclass
class AttentionWeights:
    """Projection matrices; ``W_Q`` has one entry per query head, ``W_K``/``W_V`` one per KV head."""

    W_Q: List[Tensor]
    W_K: List[Tensor]
    W_V: List[Tensor]
    W_O: Optional[Tensor] = None
    frozen: bool = False

    def parameters(self) -> List[Tensor]:
        ps = [*self.W_Q, *self.W_K, *self.W_V]
        if self.W_O is not None:
            ps.append(self.W_O)
        return ps

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for name in ("W_Q", "W_K", "W_V"):
            for i, t in enumerate(getattr(self, name)):
                out[f"{prefix}{name}.{i}"] = t
        if self.W_O is not None:
            out[f"{prefix}W_O"] = self.W_O
        return out

    def freeze(self) -> "AttentionWeights":
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True
        return self

    def check(self, cfg: AttentionConfig) -> None:
        if len(self.W_Q) != cfg.n_heads or len(self.W_K) != cfg.n_kv_heads or len(self.W_V) != cfg.n_kv_heads:
            raise ShapeError(
                f"head-count mismatch: {len(self.W_Q)}/{len(self.W_K)}/{len(self.W_V)} "
                f"for n_heads={cfg.n_heads}, n_kv_heads={cfg.n_kv_heads}"
            )
        for w in self.W_Q + self.W_K:
            if w.shape != (cfg.d_model, cfg.d_k):
                raise ShapeError(f"query/key projection shape {w.shape}, expected {(cfg.d_model, cfg.d_k)}")
        for w in self.W_V:
            if w.shape != (cfg.d_model, cfg.d_v):
                raise ShapeError(f"value projection shape {w.shape}, expected {(cfg.d_model, cfg.d_v)}")
        if self.W_O is not None and self.W_O.shape != (cfg.n_heads * cfg.d_v, cfg.d_model):
            raise ShapeError(f"W_O shape {self.W_O.shape}")


def init_attention_weights(
    cfg: AttentionConfig, rng: np.random.Generator, with_output: bool = True, requires_grad: bool = True
) -> AttentionWeights:
    std = 1.0 / math.sqrt(cfg.d_model)

    def mat(rows, cols, s=std):
        return Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=requires_grad)

    w_o = mat(cfg.n_heads * cfg.d_v, cfg.d_model, 1.0 / math.sqrt(cfg.n_heads * cfg.d_v)) if with_output else None
    return AttentionWeights(
        W_Q=[mat(cfg.d_model, cfg.d_k) for _ in range(cfg.n_heads)],
        W_K=[mat(cfg.d_model, cfg.d_k) for _ in range(cfg.n_kv_heads)],
        W_V=[mat(cfg.d_model, cfg.d_v) for _ in range(cfg.n_kv_heads)],
        W_O=w_o,
    )


def project(X: Tensor, w: AttentionWeights, cfg: AttentionConfig, head: int = 0):
    """Return (q, k, v) for one query head."""
    X = T.as_tensor(X)
    if X.ndim != 2 or X.shape[1] != cfg.d_model:
        raise ShapeError(f"input shape {X.shape}, expected (n, {cfg.d_model})")
    g = cfg.kv_index(head)
    return X @ w.W_Q[head], X @ w.W_K[g], X @ w.W_V[g]


def scores(q: Tensor, k: Tensor) -> Tensor:
    return T.scale(q @ k.T, 1.0 / math.sqrt(q.shape[-1]))


def attend(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """softmax(q k^T / sqrt(d_k) + M) v."""
    n = q.shape[-2]
    mask = T.causal_mask(n, k.shape[-2], offset=k.shape[-2] - n) if causal else None
    return T.softmax_rows(scores(q, k), mask) @ v


def attention_weights(q: Tensor, k: Tensor, causal: bool = True) -> np.ndarray:
    n = q.shape[-2]
    mask = T.causal_mask(n, k.shape[-2], offset=k.shape[-2] - n) if causal else None
    return T.softmax_rows(scores(q.detach(), k.detach()), mask).data


def attend_token(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Per-query weighted mean of visible values with exp similarity."""
    n, d_k = q.shape
    rows = []
    for i in range(n):
        hi = i + 1 if causal else k.shape[0]
        logits = T.scale(k[:hi] @ q[i], 1.0 / math.sqrt(d_k))
        top = float(logits.data.max())
        sims = T.exp(logits - top)
        num = sims @ v[:hi]
        rows.append(T.reshape(T.div(num, T.sum(sims)), (1, -1)))
    return T.concat(rows, axis=0)


def attn_matrix_form(X: Tensor, w: AttentionWeights, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    return attend(q, k, v, cfg.causal)


def attn_token_form(X: Tensor, w: AttentionWeights, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    return attend_token(q, k, v, cfg.causal)


HeadFn = Callable[[int, Tensor, Tensor, Tensor], Tensor]


def multi_head_forward(
    X: Tensor, w: AttentionWeights, cfg: AttentionConfig, head_fn: Optional[HeadFn] = None
) -> Tensor:
    """Concatenate per-head outputs and project by ``W_O``.

    ``head_fn(head, q, k, v)`` replaces the plain causal attention for each
    head; PEFT variants hook in here.
    """
    w.check(cfg)
    if w.W_O is None:
        raise ShapeError("multi-head attention needs W_O")
    X = T.as_tensor(X)
    kv_cache = {}
    outs = []
    for h in range(cfg.n_heads):
        g = cfg.kv_index(h)
        if g not in kv_cache:
            kv_cache[g] = (X @ w.W_K[g], X @ w.W_V[g])
        k, v = kv_cache[g]
        q = X @ w.W_Q[h]
        outs.append(head_fn(h, q, k, v) if head_fn is not None else attend(q, k, v, cfg.causal))
    return T.concat(outs, axis=-1) @ w.W_O

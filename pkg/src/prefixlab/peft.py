"""Context-based PEFT variants layered on a frozen attention head.

The design ladder, from most constrained to least:

* ICL: demonstrations prepended to the input sequence.
* Prefix-Tuning: trainable vectors ``S`` whose keys/values join the softmax.
* lambda-split: the prefix branch becomes its own normalised attention mixed
  in with a fixed weight.
* kernel form: the prefix branch linearised with a feature map ``phi``.
* M/N form: the prefix sums replaced by free matrices ``M`` and ``N``.
* Prefix-Tuning+: base attention plus ``phi(q) @ M`` outside the head.
* in-head hybrid: ``M``/``N`` kept inside the softmax normaliser.

LoRA is provided as the low-rank weight-update baseline.

Most functions come in two flavours: a ``*_attend`` core that takes already
projected ``q, k, v`` (what the model calls per head) and an ``X``-level
wrapper that projects through frozen :class:`AttentionWeights`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionWeights, attend, project, scores
from .tensor import DivisionGuardError, ShapeError, Tensor

FEATURE_MAPS = ("elu-plus-one", "raw-elu", "relu-affine")


# -- feature maps ---------------------------------------------------------


@dataclass
class FeatureMapSpec:
    """``kind`` is one of elu-plus-one (default), raw-elu or relu-affine.

    relu-affine computes ``max(0, W x + b)`` with ``W`` of shape
    ``(d_phi, d_k)``; it is frozen unless ``trainable`` is set.
    """

    kind: str = "elu-plus-one"
    W: Optional[Tensor] = None
    b: Optional[Tensor] = None
    trainable: bool = False

    def __post_init__(self):
        if self.kind not in FEATURE_MAPS:
            raise ValueError(f"unknown feature map {self.kind!r}")
        if self.kind == "relu-affine" and self.W is not None:
            if self.W.shape[0] < 1:
                raise ValueError("d_phi must be >= 1")
            for t in (self.W, self.b):
                if t is not None:
                    t.requires_grad = self.trainable

    def out_dim(self, d_k: int) -> int:
        if self.kind == "relu-affine":
            if self.W is None:
                raise ValueError("relu-affine feature map needs W and b")
            return self.W.shape[0]
        return d_k

    def parameters(self) -> List[Tensor]:
        if self.kind == "relu-affine" and self.trainable:
            return [self.W, self.b]
        return []


def relu_affine(d_k: int, d_phi: int, rng: np.random.Generator, trainable: bool = False) -> FeatureMapSpec:
    W = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d_k), size=(d_phi, d_k)))
    b = Tensor(rng.normal(0.0, 0.1, size=(d_phi,)))
    return FeatureMapSpec("relu-affine", W, b, trainable)


def feature_map_eval(phi: FeatureMapSpec, x: Tensor) -> Tensor:
    """Apply ``phi`` to a vector or to every row of a matrix."""
    x = T.as_tensor(x)
    if phi.kind == "elu-plus-one":
        return T.elu_plus_one(x)
    if phi.kind == "raw-elu":
        return T.elu(x)
    if phi.W is None or phi.b is None:
        raise ValueError("relu-affine feature map needs W and b")
    if x.shape[-1] != phi.W.shape[1]:
        raise ShapeError(f"feature map expects width {phi.W.shape[1]}, got {x.shape[-1]}")
    return T.relu(x @ phi.W.T + phi.b)


# -- parameter containers -------------------------------------------------


@dataclass
class PrefixParams:
    S: Tensor

    @property
    def p(self) -> int:
        return self.S.shape[0]


def init_prefix(p: int, d: int, rng: np.random.Generator, scale: float = 0.02) -> PrefixParams:
    if p < 0:
        raise ValueError("prefix length must be >= 0")
    return PrefixParams(Tensor(rng.normal(0.0, scale, size=(p, d)), requires_grad=True))


@dataclass
class PTPlusParams:
    M: Tensor
    phi: FeatureMapSpec = field(default_factory=FeatureMapSpec)
    N: Optional[Tensor] = None

    def parameters(self) -> List[Tensor]:
        ps = [self.M]
        if self.N is not None:
            ps.append(self.N)
        return ps + self.phi.parameters()


def init_ptplus(d_phi: int, d_v: int, phi: Optional[FeatureMapSpec] = None, with_n: bool = False) -> PTPlusParams:
    """Zero ``M`` so the adapted head starts identical to the base head."""
    M = Tensor(np.zeros((d_phi, d_v)), requires_grad=True)
    N = Tensor(np.zeros(d_phi), requires_grad=True) if with_n else None
    return PTPlusParams(M, phi or FeatureMapSpec(), N)


@dataclass
class LoraParams:
    """Per-head low-rank factors keyed by target matrix name (W_Q, W_K, W_V)."""

    rank: int
    factors: Dict[str, List[Tuple[Tensor, Tensor]]]

    @property
    def targets(self) -> Tuple[str, ...]:
        return tuple(self.factors)

    def parameters(self) -> List[Tensor]:
        return [t for pairs in self.factors.values() for ab in pairs for t in ab]


def init_lora(
    w: AttentionWeights, rank: int, rng: np.random.Generator, targets: Sequence[str] = ("W_Q", "W_V")
) -> LoraParams:
    factors = {}
    for name in targets:
        pairs = []
        for W in getattr(w, name):
            d, d_out = W.shape
            A = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, rank)), requires_grad=True)
            B = Tensor(np.zeros((rank, d_out)), requires_grad=True)
            pairs.append((A, B))
        factors[name] = pairs
    return LoraParams(rank, factors)


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return lam


# -- ICL ------------------------------------------------------------------


def icl_prepend(demos: Tensor, X: Tensor) -> Tensor:
    """Demonstrations first, then the input; read outputs from row ``len(demos)`` on."""
    demos, X = T.as_tensor(demos), T.as_tensor(X)
    if demos.shape[0] == 0:
        return X
    return T.concat([demos, X], axis=0)


# -- q/k/v-level cores ----------------------------------------------------


def _prefix_mask(n: int, p: int) -> np.ndarray:
    return np.concatenate([np.zeros((n, p)), T.causal_mask(n, n)], axis=1)


def prefix_kv(S: Tensor, w: AttentionWeights, cfg: AttentionConfig, head: int = 0) -> Tuple[Tensor, Tensor]:
    g = cfg.kv_index(head)
    return S @ w.W_K[g], S @ w.W_V[g]


def _join(prefix: Tensor, x: Tensor) -> Tensor:
    """Stack prefix rows in front of ``x`` (batched ``x`` gets the prefix tiled)."""
    if x.ndim == 3 and prefix.ndim == 2:
        prefix = T.expand_batch(prefix, x.shape[0])
    return T.concat([prefix, x], axis=-2)


def prefix_attend(q: Tensor, k: Tensor, v: Tensor, pk: Tensor, pv: Tensor) -> Tensor:
    """One causal softmax over the ``p`` prefix positions and the visible inputs."""
    if pk.shape[0] == 0:
        return attend(q, k, v)
    logits = scores(q, _join(pk, k))
    weights = T.softmax_rows(logits, _prefix_mask(q.shape[-2], pk.shape[0]))
    return weights @ _join(pv, v)


def prefix_weights(q: Tensor, k: Tensor, pk: Tensor) -> np.ndarray:
    """Mixture weights over ``[prefix | input]`` columns, each row summing to 1."""
    n, p = q.shape[-2], pk.shape[0]
    logits = scores(q.detach(), _join(pk.detach(), k.detach()))
    return T.softmax_rows(logits, _prefix_mask(n, p)).data


def prefix_decomposed(q: Tensor, k: Tensor, v: Tensor, pk: Tensor, pv: Tensor) -> Tuple[Tensor, Tensor]:
    """Re-weighted base output plus query-dependent prefix bias.

    Returns ``(out, alpha)`` with ``out_i = (1 - alpha_i) o_i + sum_j alpha_ij v'_j``
    and ``alpha`` the ``(n, p)`` share of softmax mass on each prefix slot.
    """
    n, p = q.shape[-2], pk.shape[0]
    base = attend(q, k, v)
    if p == 0:
        return base, Tensor(np.zeros(q.shape[:-1] + (0,)))
    logits = scores(q, _join(pk, k))
    weights = T.softmax_rows(logits, _prefix_mask(n, p))
    alpha = weights[..., :p]
    alpha_tot = T.sum(alpha, axis=-1, keepdims=True)
    out = (1.0 - alpha_tot) * base + alpha @ pv
    return out, alpha


def prefix_only_attend(q: Tensor, pk: Tensor, pv: Tensor) -> Tensor:
    """Each query attends to the prefix slots alone (no causal mask)."""
    return T.softmax_rows(scores(q, pk)) @ pv


def lambda_split_attend(q, k, v, pk, pv, lam: float) -> Tensor:
    lam = check_lambda(lam)
    base = attend(q, k, v)
    if lam == 1.0:
        return base
    if pk.shape[0] == 0:
        raise ValueError("lambda < 1 needs at least one prefix vector")
    return lam * base + (1.0 - lam) * prefix_only_attend(q, pk, pv)


def init_mn_from_prefix(S: Tensor, w: AttentionWeights, phi: FeatureMapSpec, cfg: AttentionConfig, head: int = 0):
    """``M = sum_j phi(W_K s_j) (W_V s_j)^T`` and ``N = sum_j phi(W_K s_j)``."""
    pk, pv = prefix_kv(T.as_tensor(S), w, cfg, head)
    return mn_from_kv(pk, pv, phi, cfg.d_k)


def mn_from_kv(pk: Tensor, pv: Tensor, phi: FeatureMapSpec, d_k: int) -> Tuple[Tensor, Tensor]:
    d_phi = phi.out_dim(d_k)
    if pk.shape[0] == 0:
        return Tensor(np.zeros((d_phi, pv.shape[1]))), Tensor(np.zeros(d_phi))
    fk = feature_map_eval(phi, pk)
    return fk.T @ pv, T.sum(fk, axis=0)


def _ratio_branch(phi_q: Tensor, M: Tensor, N: Tensor) -> Tensor:
    den = phi_q @ N
    if np.any(den.data < T.DIV_GUARD):
        raise DivisionGuardError("phi(q)^T N fell below the guard; use a positive feature map")
    return T.div(phi_q @ M, T.reshape(den, den.shape + (1,)))


def mn_attend(q, k, v, M: Tensor, N: Tensor, lam: float, phi: FeatureMapSpec) -> Tensor:
    lam = check_lambda(lam)
    base = attend(q, k, v)
    if lam == 1.0:
        return base
    branch = _ratio_branch(feature_map_eval(phi, q), M, N)
    return lam * base + (1.0 - lam) * branch


def kernel_prefix_attend(q, k, v, pk, pv, lam: float, phi: FeatureMapSpec) -> Tensor:
    lam = check_lambda(lam)
    if lam == 1.0:
        return attend(q, k, v)
    if pk.shape[0] == 0:
        raise ValueError("lambda < 1 needs at least one prefix vector")
    M, N = mn_from_kv(pk, pv, phi, q.shape[1])
    return mn_attend(q, k, v, M, N, lam, phi)


def ptplus_attend(q, k, v, M: Tensor, phi: FeatureMapSpec) -> Tensor:
    fq = feature_map_eval(phi, q)
    if fq.shape[-1] != M.shape[0]:
        raise ShapeError(f"phi output width {fq.shape[-1]} != M rows {M.shape[0]}")
    return attend(q, k, v) + fq @ M


def hybrid_attend(q, k, v, M: Tensor, N: Tensor, phi: FeatureMapSpec, similarity: str = "exp") -> Tensor:
    """``(sum_j sim v_j + phi(q) M) / (sum_j sim + phi(q) N)`` over visible inputs.

    With ``similarity="linear"`` the input similarity is ``phi(q)^T phi(k)``,
    which makes the whole head linear attention.
    """
    n, n_key = q.shape[-2], k.shape[-2]
    fq = feature_map_eval(phi, q)
    if fq.shape[-1] != M.shape[0]:
        raise ShapeError(f"phi output width {fq.shape[-1]} != M rows {M.shape[0]}")
    keep = np.tril(np.ones((n, n_key)), k=n_key - n)
    if similarity == "exp":
        logits = scores(q, k)
        # factor exp(-m) out of both sums; m >= 0 keeps exp(-m) <= 1
        m = np.maximum(np.where(keep > 0, logits.data, -np.inf).max(axis=-1, keepdims=True), 0.0)
        sims = T.exp((logits - m) * keep) * keep
        shrink = np.exp(-m)
        num = sims @ v + (fq @ M) * shrink
        fn = fq @ N
        den = T.sum(sims, axis=-1, keepdims=True) + T.reshape(fn, fn.shape + (1,)) * shrink
    elif similarity == "linear":
        sims = (fq @ feature_map_eval(phi, k).T) * keep
        num = sims @ v + fq @ M
        fn = fq @ N
        den = T.sum(sims, axis=-1, keepdims=True) + T.reshape(fn, fn.shape + (1,))
    else:
        raise ValueError(f"unknown similarity {similarity!r}")
    if np.any(den.data < T.DIV_GUARD):
        raise DivisionGuardError("hybrid denominator fell below the guard")
    return T.div(num, den)


# -- X-level wrappers -----------------------------------------------------


def _S(S) -> Tensor:
    return S.S if isinstance(S, PrefixParams) else T.as_tensor(S)


def pt_forward(X, w: AttentionWeights, S, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    pk, pv = prefix_kv(_S(S), w, cfg, head)
    return prefix_attend(q, k, v, pk, pv)


def pt_decomposed(X, w: AttentionWeights, S, cfg: AttentionConfig, head: int = 0) -> Tuple[Tensor, Tensor]:
    q, k, v = project(X, w, cfg, head)
    pk, pv = prefix_kv(_S(S), w, cfg, head)
    return prefix_decomposed(q, k, v, pk, pv)


def lambda_split_forward(X, w, S, lam: float, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    pk, pv = prefix_kv(_S(S), w, cfg, head)
    return lambda_split_attend(q, k, v, pk, pv, lam)


def kernel_prefix_forward(X, w, S, lam: float, phi: FeatureMapSpec, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    pk, pv = prefix_kv(_S(S), w, cfg, head)
    return kernel_prefix_attend(q, k, v, pk, pv, lam, phi)


def mn_forward(X, w, M, N, lam: float, phi: FeatureMapSpec, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    return mn_attend(q, k, v, T.as_tensor(M), T.as_tensor(N), lam, phi)


def ptplus_forward(X, w, M, phi: FeatureMapSpec, cfg: AttentionConfig, head: int = 0) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    return ptplus_attend(q, k, v, T.as_tensor(M), phi)


def inhead_hybrid_forward(
    X, w, M, N, phi: FeatureMapSpec, cfg: AttentionConfig, head: int = 0, similarity: str = "exp"
) -> Tensor:
    q, k, v = project(X, w, cfg, head)
    return hybrid_attend(q, k, v, T.as_tensor(M), T.as_tensor(N), phi, similarity)


def lora_apply(w: AttentionWeights, params: LoraParams) -> AttentionWeights:
    """New weights with ``W + A @ B`` on every targeted matrix; ``w`` is left untouched."""
    mats = {"W_Q": list(w.W_Q), "W_K": list(w.W_K), "W_V": list(w.W_V)}
    for name, pairs in params.factors.items():
        if name not in mats:
            raise ValueError(f"unknown LoRA target {name!r}")
        if len(pairs) != len(mats[name]):
            raise ShapeError(f"{name}: {len(pairs)} factor pairs for {len(mats[name])} matrices")
        for i, (A, B) in enumerate(pairs):
            W = mats[name][i]
            d, d_out = W.shape
            if params.rank > min(d, d_out):
                raise ValueError(f"LoRA rank {params.rank} exceeds min({d}, {d_out})")
            if A.shape != (d, params.rank) or B.shape != (params.rank, d_out):
                raise ShapeError(f"{name}[{i}]: factors {A.shape}, {B.shape} do not fit {W.shape}")
            mats[name][i] = W + A @ B
    return AttentionWeights(mats["W_Q"], mats["W_K"], mats["W_V"], w.W_O, frozen=w.frozen)

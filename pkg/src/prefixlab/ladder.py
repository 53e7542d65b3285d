"""Equivalence ladder: each design step checked against its neighbour on random heads.

Every rung compares two independently assembled evaluations of the same
quantity and records the worst deviation over all instances. Instances
include the ``n=1`` and ``p=0`` edges.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, attn_matrix_form, attn_token_form, init_attention_weights, project
from .peft import (
    FeatureMapSpec,
    feature_map_eval,
    init_mn_from_prefix,
    inhead_hybrid_forward,
    kernel_prefix_forward,
    mn_forward,
    prefix_kv,
    pt_decomposed,
    pt_forward,
)

FAULTS = ("decomposition",)


@dataclass
class Instance:
    seed: int
    n: int
    p: int
    d_model: int
    d_k: int
    X: np.ndarray
    S: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()}

    def parts(self):
        cfg = AttentionConfig(self.d_model, self.d_k, self.d_k)
        rng = np.random.default_rng(0)
        w = init_attention_weights(cfg, rng, with_output=False, requires_grad=False)
        w.W_Q[0] = T.Tensor(self.W_Q)
        w.W_K[0] = T.Tensor(self.W_K)
        w.W_V[0] = T.Tensor(self.W_V)
        return cfg, w, T.Tensor(self.X), T.Tensor(self.S)


@dataclass
class Rung:
    name: str
    tol: float
    max_dev: float = 0.0
    count: int = 0
    failure: Optional[dict] = None

    @property
    def passed(self) -> bool:
        return self.failure is None


def make_instances(seed: int = 0, count: int = 100, max_n: int = 16, max_p: int = 8, max_d: int = 8) -> List[Instance]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        if i == 0:
            n, p = 1, 0
        elif i == 1:
            n, p = 1, 1
        elif i == 2:
            n, p = int(rng.integers(2, max_n + 1)), 0
        else:
            n, p = int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_p + 1))
        d, dk = int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_d + 1))
        out.append(
            Instance(
                seed, n, p, d, dk,
                rng.normal(size=(n, d)), rng.normal(size=(p, d)),
                rng.normal(size=(d, dk)), rng.normal(size=(d, dk)), rng.normal(size=(d, dk)),
            )
        )
    return out


def flat_linear_prefix_attention(q, k, v, pk, pv, phi: FeatureMapSpec) -> np.ndarray:
    """Linearised attention over ``p + i`` positions, one query at a time."""
    f = lambda x: feature_map_eval(phi, T.Tensor(np.atleast_2d(x))).data[0]
    q, k, v, pk, pv = (np.asarray(getattr(a, "data", a)) for a in (q, k, v, pk, pv))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        keys = list(pk) + list(k[: i + 1])
        vals = list(pv) + list(v[: i + 1])
        fq = f(q[i])
        num = np.zeros(v.shape[1])
        den = 0.0
        for kj, vj in zip(keys, vals):
            s = float(fq @ f(kj))
            num += s * vj
            den += s
        out[i] = num / den
    return out


def _forms(inst: Instance, fault) -> float:
    cfg, w, X, _ = inst.parts()
    return np.abs(attn_matrix_form(X, w, cfg).data - attn_token_form(X, w, cfg).data).max()


def _decomposition(inst: Instance, fault) -> float:
    cfg, w, X, S = inst.parts()
    ref = pt_forward(X, w, S, cfg).data
    out, alpha = pt_decomposed(X, w, S, cfg)
    got = out.data
    if fault == "decomposition":
        got = got + 1e-6
    return np.abs(ref - got).max()


def _kernel_vs_mn(inst: Instance, fault) -> float:
    if inst.p == 0:
        return 0.0
    cfg, w, X, S = inst.parts()
    phi = FeatureMapSpec()
    M, N = init_mn_from_prefix(S, w, phi, cfg)
    a = kernel_prefix_forward(X, w, S, 0.5, phi, cfg).data
    b = mn_forward(X, w, M, N, 0.5, phi, cfg).data
    return np.abs(a - b).max()


def _hybrid_vs_flat(inst: Instance, fault) -> float:
    cfg, w, X, S = inst.parts()
    phi = FeatureMapSpec()
    M, N = init_mn_from_prefix(S, w, phi, cfg)
    got = inhead_hybrid_forward(X, w, M, N, phi, cfg, similarity="linear").data
    q, k, v = project(X, w, cfg)
    pk, pv = prefix_kv(S, w, cfg)
    return np.abs(got - flat_linear_prefix_attention(q, k, v, pk, pv, phi)).max()


RUNGS: Dict[str, tuple] = {
    "matrix form == token form": (_forms, 1e-10),
    "joint softmax == decomposed reassembly": (_decomposition, 1e-10),
    "kernel prefix == M/N with seeded init": (_kernel_vs_mn, 1e-12),
    "linearised hybrid == flat linear attention": (_hybrid_vs_flat, 1e-10),
}


def run_ladder(seed: int = 0, count: int = 100, fault: Optional[str] = None) -> List[Rung]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    instances = make_instances(seed, count)
    rungs = []
    for name, (fn, tol) in RUNGS.items():
        rung = Rung(name, tol)
        for idx, inst in enumerate(instances):
            dev = float(fn(inst, fault))
            rung.count += 1
            rung.max_dev = max(rung.max_dev, dev)
            if not dev <= tol and rung.failure is None:
                rung.failure = {"rung": name, "index": idx, "deviation": dev, "tolerance": tol, "instance": inst.to_dict()}
        rungs.append(rung)
    return rungs


def format_table(rungs: List[Rung]) -> str:
    width = max(len(r.name) for r in rungs)
    lines = [f"{'rung':<{width}}  {'instances':>9}  {'max dev':>10}  {'tol':>7}  result"]
    for r in rungs:
        lines.append(f"{r.name:<{width}}  {r.count:>9}  {r.max_dev:>10.2e}  {r.tol:>7.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

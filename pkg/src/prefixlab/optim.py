"""AdamW with decoupled weight decay and a constant learning rate."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass(frozen=True)
class OptimizerSpec:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    max_steps: int = 500
    batch_size: int = 2
    grad_clip: Optional[float] = None
    log_every: int = 10

    @classmethod
    def preset(cls, name: str) -> "OptimizerSpec":
        if name == "desk":
            return cls()
        if name == "paper-appendix":
            return cls(lr=2e-5, max_steps=4000)
        raise ValueError(f"unknown optimizer preset {name!r}")

    def with_(self, **kw) -> "OptimizerSpec":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], st: OptimizerState, spec: OptimizerSpec) -> None:
    """One in-place AdamW update of every tensor in ``params``."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for {name}")
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    st.step += 1
    t = st.step
    c1 = 1.0 - spec.beta1**t
    c2 = 1.0 - spec.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = st.m.get(name)
        v = st.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = spec.beta1 * m + (1.0 - spec.beta1) * g
        v = spec.beta2 * v + (1.0 - spec.beta2) * g * g
        st.m[name], st.v[name] = m, v
        m_hat = m / c1
        v_hat = v / c2
        # decay first so zero-gradient steps contract by exactly (1 - lr * wd)
        p.data *= 1.0 - spec.lr * spec.weight_decay
        p.data -= spec.lr * m_hat / (np.sqrt(v_hat) + spec.eps)


def clip_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / total)
    return total

"""Analysis instruments: bias spectrum, CKA/HSIC, attention maps and prefix mass.

The eigensolvers here are deliberately dependency-free: cyclic Jacobi for the
symmetric covariance and one-sided (Hestenes) Jacobi for singular values, so
each can be checked against the other.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attention import attention_weights
from .peft import prefix_weights
from .tensor import ShapeError

SPECTRUM_SCHEMA = "prefixlab-spectrum/v1"


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    n_tokens: int
    source: Tuple[str, str] = ("", "")
    eigenvectors: Optional[np.ndarray] = None

    @property
    def participation_ratio(self) -> float:
        return participation_ratio(self.eigenvalues)

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "n_tokens": self.n_tokens,
            "source": list(self.source),
            "participation_ratio": self.participation_ratio,
        }


@dataclass
class CkaReport:
    score: float
    layer: Optional[int] = None
    kernel: str = "linear"
    m: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionMap:
    weights: np.ndarray
    layer: int
    head: int
    method: str

    def to_dict(self) -> dict:
        return {"layer": self.layer, "head": self.head, "method": self.method, "weights": self.weights.tolist()}


# -- spectrum -------------------------------------------------------------


def bias_matrix(F_base, F_tuned, normalize: bool = True, unit_variance: bool = True) -> np.ndarray:
    """``F_tuned - F_base``, optionally column-centred and scaled to unit variance.

    Columns with zero spread stay zero after scaling.
    """
    Fb = np.asarray(getattr(F_base, "data", F_base), dtype=np.float64)
    Ft = np.asarray(getattr(F_tuned, "data", F_tuned), dtype=np.float64)
    if Fb.shape != Ft.shape or Fb.ndim != 2:
        raise ShapeError(f"representation shapes differ or are not matrices: {Fb.shape} vs {Ft.shape}")
    dF = Ft - Fb
    if not normalize:
        return dF
    dF = dF - dF.mean(axis=0, keepdims=True)
    if unit_variance and dF.shape[0] > 1:
        sd = dF.std(axis=0, ddof=1, keepdims=True)
        dF = np.divide(dF, sd, out=np.zeros_like(dF), where=sd > 1e-12)
    return dF


def jacobi_eigh(A, tol: float = 1e-12, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Stops once every off-diagonal magnitude is below ``tol`` (scaled by the
    Frobenius norm when that exceeds 1). Returns eigenvalues in descending
    order and the matching eigenvectors as columns.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError("jacobi_eigh needs a square matrix")
    if not np.allclose(A, A.T, atol=1e-10 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    d = A.shape[0]
    V = np.eye(d)
    thresh = tol * max(1.0, float(np.linalg.norm(A)))
    for _ in range(max_sweeps):
        off = np.abs(A - np.diag(np.diag(A)))
        if d < 2 or off.max() < thresh:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


def singular_values_one_sided(A, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Singular values of ``A`` by one-sided Jacobi column orthogonalisation (descending)."""
    U = np.array(A, dtype=np.float64)
    if U.ndim != 2:
        raise ShapeError("need a matrix")
    n = U.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                a = U[:, i] @ U[:, i]
                b = U[:, j] @ U[:, j]
                g = U[:, i] @ U[:, j]
                if abs(g) <= tol * np.sqrt(a * b) or g == 0.0:
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * g)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ui = U[:, i].copy()
                U[:, i] = c * ui - s * U[:, j]
                U[:, j] = s * ui + c * U[:, j]
        if not rotated:
            break
    else:
        raise RuntimeError("one-sided Jacobi did not converge")
    return np.sort(np.linalg.norm(U, axis=0))[::-1]


def covariance_spectrum(dF, k: int = 50, with_vectors: bool = False, source: Tuple[str, str] = ("", "")) -> SpectrumReport:
    """Top-``k`` eigenvalues of ``dF^T dF / (n - 1)``."""
    dF = np.asarray(getattr(dF, "data", dF), dtype=np.float64)
    n = dF.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least two rows")
    sigma = dF.T @ dF / (n - 1)
    vals, vecs = jacobi_eigh(sigma)
    k = min(k, len(vals))
    return SpectrumReport(vals[:k], n, tuple(source), vecs[:, :k] if with_vectors else None)


def participation_ratio(eigenvalues) -> float:
    """``(sum l)^2 / sum l^2``: effective number of components (0 for an all-zero spectrum)."""
    lam = np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None)
    sq = float((lam * lam).sum())
    return float(lam.sum() ** 2 / sq) if sq > 0 else 0.0


def spectrum_csv(reports: Dict[str, SpectrumReport]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {SPECTRUM_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "eigenvalue", "method"])
    for method, rep in reports.items():
        for r, lam in enumerate(rep.eigenvalues, start=1):
            w.writerow([r, repr(float(lam)), method])
    return buf.getvalue()


# -- CKA ------------------------------------------------------------------


def linear_gram(X) -> np.ndarray:
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    return X @ X.T


def hsic(K_X, K_Y) -> float:
    """``tr(K_X H K_Y H) / (m - 1)^2`` with ``H = I - 11^T / m``."""
    K_X = np.asarray(K_X, dtype=np.float64)
    K_Y = np.asarray(K_Y, dtype=np.float64)
    m = K_X.shape[0]
    if K_X.shape != (m, m) or K_Y.shape != (m, m):
        raise ShapeError("Gram matrices must be square and the same size")
    if m < 2:
        raise ValueError("HSIC needs at least two samples")
    for K in (K_X, K_Y):
        if np.abs(K - K.T).max() > 1e-10:
            raise ValueError("Gram matrix is not symmetric")
    H = np.eye(m) - np.full((m, m), 1.0 / m)
    return float(np.trace(K_X @ H @ K_Y @ H) / (m - 1) ** 2)


def cka(X, Y, layer: Optional[int] = None) -> CkaReport:
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    Y = np.asarray(getattr(Y, "data", Y), dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ShapeError("CKA needs the same number of samples on both sides")
    K, L = linear_gram(X), linear_gram(Y)
    xx, yy = hsic(K, K), hsic(L, L)
    if xx < 1e-15 or yy < 1e-15:
        raise ValueError("degenerate (constant) representation")
    return CkaReport(hsic(K, L) / np.sqrt(xx * yy), layer, "linear", X.shape[0])


# -- model probes ---------------------------------------------------------


def _run(model, tokens) -> dict:
    from .trainer import _inference

    record: dict = {}
    _inference(model).forward(np.asarray(tokens, dtype=np.int64), record=record)
    return record


def _check_indices(model, layer: int, head: int) -> None:
    cfg = model.config
    if not 0 <= layer < cfg.n_layers:
        raise IndexError(f"layer {layer} out of range [0, {cfg.n_layers})")
    if not 0 <= head < cfg.n_heads:
        raise IndexError(f"head {head} out of range [0, {cfg.n_heads})")


def extract_attention_map(model, tokens, layer: int, head: int) -> AttentionMap:
    """Post-softmax weights over real tokens; prefix columns dropped and rows renormalised."""
    _check_indices(model, layer, head)
    rec = _run(model, tokens)
    q, k, pk = rec["qk"][(layer, head)]
    if pk is None:
        w = attention_weights(T.Tensor(q), T.Tensor(k))
    else:
        full = prefix_weights(T.Tensor(q), T.Tensor(k), T.Tensor(pk))
        w = full[..., pk.shape[0] :]
        w = w / w.sum(axis=-1, keepdims=True)
    return AttentionMap(w, layer, head, model.method.kind)


def alpha_trace(model, tokens, layer: int, head: int) -> np.ndarray:
    """Prefix mass per query position for a prefix-tuned model."""
    _check_indices(model, layer, head)
    if model.method.kind != "prefix" or model.method.prefix_len == 0:
        raise ValueError(f"method {model.method.kind!r} has no prefix branch to trace")
    if layer not in model.layers_with_method():
        raise ValueError(f"layer {layer} carries no prefix")
    rec = _run(model, tokens)
    q, k, pk = rec["qk"][(layer, head)]
    full = prefix_weights(T.Tensor(q), T.Tensor(k), T.Tensor(pk))
    return full[..., : pk.shape[0]].sum(axis=-1)


def layer_outputs(model, examples, layer: int = -1, kind: str = "attn_out") -> np.ndarray:
    """Stack per-token representations of ``layer`` over all examples.

    ``kind`` is ``attn_out`` (attention block output) or ``hidden``
    (residual stream after the layer).
    """
    if kind not in ("attn_out", "hidden"):
        raise ValueError(f"unknown representation kind {kind!r}")
    rows = []
    for ex in examples:
        tokens = getattr(ex, "tokens", ex)
        rows.append(_run(model, tokens)[kind][layer])
    return np.concatenate(rows, axis=0)


def bias_spectrum(base, tuned, examples, layer: int = -1, k: int = 50, normalize: bool = True) -> SpectrumReport:
    dF = bias_matrix(layer_outputs(base, examples, layer), layer_outputs(tuned, examples, layer), normalize)
    return covariance_spectrum(dF, k, source=(base.method.kind, tuned.method.kind))


def representation_cka(base, tuned, examples, layer: int = -1) -> CkaReport:
    X = layer_outputs(base, examples, layer, "hidden")
    Y = layer_outputs(tuned, examples, layer, "hidden")
    rep = cka(X, Y)
    rep.layer = layer if layer >= 0 else base.config.n_layers + layer
    return rep

"""Dense float64 tensors with a reverse-mode autodiff tape.

Every op returns a new :class:`Tensor` that remembers its parents and a
backward rule. :meth:`Tensor.backward` builds a :class:`Tape` (the ops that
produced the loss, in topological order) and walks it once in reverse.

Broadcasting is one-sided: a scalar, a row ``(1, n)``, a column ``(m, 1)``
or a shape suffix (batch broadcast) stretches to the larger operand, never
both ways at once. Rank 3 is allowed for batching along the leading axis.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

DIV_GUARD = 1e-12

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DivisionGuardError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A rank <= 3 float64 array that can take part in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        _op: str = "leaf",
    ):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} tensors are not supported")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values produced by {_op}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        rg = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise TapeError("loss is detached from the tape (no input requires grad)")
        tape = Tape.from_output(self)
        tape.run_backward(np.asarray(grad, dtype=np.float64))


class Tape:
    """Ops that produced one output, stored in topological order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def run_backward(self, seed: np.ndarray) -> None:
        out = self.nodes[-1]
        grads = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- helpers --------------------------------------------------------------


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents if rg else (), _backward=backward if rg else None, _op=op)


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    """One-sided broadcasting only: the smaller operand stretches to the larger."""
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    big, small = (a, b) if a.ndim > b.ndim or (a.ndim == b.ndim and a.size >= b.size) else (b, a)
    ok = small.ndim <= big.ndim and all(
        s == g or s == 1 for s, g in zip(small.shape[::-1], big.shape[::-1])
    )
    if not ok:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- binary elementwise ---------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise ``a / b``; raises if any ``|b| < 1e-12``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(np.abs(b.data) < DIV_GUARD):
        raise DivisionGuardError(f"denominator magnitude below {DIV_GUARD:g}")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "div")


def scale(a: ArrayLike, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- unary elementwise ----------------------------------------------------


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError instead
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < DIV_GUARD):
        raise DivisionGuardError("log of a value below the guard")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def elu(a: ArrayLike, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data, neg_part)
    dout = np.where(pos, 1.0, neg_part + alpha)
    return _make(out, (a,), lambda g: (g * dout,), "elu")


def elu_plus_one(a: ArrayLike) -> Tensor:
    """``elu(x) + 1`` evaluated as ``exp(x)`` on the negative side so it stays positive."""
    a = as_tensor(a)
    pos = a.data > 0
    e = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data + 1.0, e)
    dout = np.where(pos, 1.0, e)
    return _make(out, (a,), lambda g: (g * dout,), "elu_plus_one")


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


_UNARY = {"elu": elu, "elu_plus_one": elu_plus_one, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "divide": div, "div": div}


def elementwise(op: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """Dispatch an elementwise op by tag. ``scale`` takes a float ``b``."""
    if op == "scale":
        if b is None:
            raise ValueError("scale needs a factor")
        return scale(a, float(b.item() if isinstance(b, Tensor) else b))
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} is binary")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra and reductions ----------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batched right operand needs a matching batched left, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 3:
            return ga, np.swapaxes(ad, -1, -2) @ g
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        return a
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: ArrayLike, shape: tuple) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Iterable[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts)))

    return _make(out, tuple(ts), backward, "concat")


def expand_batch(a: ArrayLike, batch: int) -> Tensor:
    """Tile ``a`` along a new leading batch axis."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (batch,) + a.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),), "expand_batch")


def take(a: ArrayLike, idx) -> Tensor:
    """Basic/advanced indexing with a scatter-add backward (used for embedding lookup)."""
    a = as_tensor(a)
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "take")


# -- fused row ops --------------------------------------------------------


def causal_mask(n_query: int, n_key: int, offset: int = 0) -> np.ndarray:
    """0 where key j <= query i + offset, -inf elsewhere."""
    i = np.arange(n_query)[:, None]
    j = np.arange(n_key)[None, :]
    return np.where(j <= i + offset, 0.0, -np.inf)


def softmax_rows(a: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row softmax with an additive 0/-inf mask; masked entries come out exactly 0."""
    a = as_tensor(a)
    x = a.data
    allowed = np.ones(x.shape, dtype=bool)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape not in (x.shape, x.shape[-2:]):
            raise ShapeError(f"mask shape {mask.shape} != logits shape {x.shape}")
        if not np.all((mask == 0.0) | (mask == -np.inf)):
            raise ValueError("mask entries must be 0 or -inf")
        allowed = np.broadcast_to(mask == 0.0, x.shape)
        if np.any(~allowed.any(axis=-1)):
            raise ValueError("softmax row with every entry masked")
    shifted = np.where(allowed, x, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward, "softmax_rows")


def log_softmax_rows(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax_rows")


def rms_norm(x: ArrayLike, gain: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Row-wise RMS normalisation followed by a per-feature gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    r = np.sqrt((x.data**2).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data / r
    out = xhat * gain.data

    def backward(g):
        gx_hat = g * gain.data
        gx = (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d) / r
        return gx, _unbroadcast(g * xhat, gain.shape)

    return _make(out, (x, gain), backward, "rms_norm")


# -- gradient checking ----------------------------------------------------


def finite_diff(f: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``x``."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(f(Tensor(base.copy())).data).reshape(()))
        flat[i] = orig - h
        fm = float(np.asarray(f(Tensor(base.copy())).data).reshape(()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def param(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)

"""Small reverse-mode autodiff over numpy float64 arrays.

Only the operations the confidence models need are provided.  Each op
computes its value eagerly and, when any input requires a gradient, records a
closure that maps the output gradient onto the inputs.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Evaluate without recording the graph (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("_value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self._value

    @value.setter
    def value(self, v):
        # always an ndarray, so 0-d parameters stay mutable in place
        self._value = np.asarray(v, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | float | None = None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(value)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check(cond: bool, msg: str):
    if not cond:
        raise ValueError(f"shape mismatch: {msg}")


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ValueError(f"shape mismatch: add {a.shape} + {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ValueError(f"shape mismatch: sub {a.shape} - {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _result(value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ValueError(f"shape mismatch: mul {a.shape} * {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _result(value, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.value * s, (a,), lambda g: a._accumulate(g * s))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    value = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(value, (a,), lambda g: a._accumulate(g * value * (1.0 - value)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.value)
    return _result(value, (a,), lambda g: a._accumulate(g * (1.0 - value * value)))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.value
    return _result(np.log(x), (a,), lambda g: a._accumulate(g / x))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _result(np.clip(a.value, lo, hi), (a,), lambda g: a._accumulate(g * inside))


# --------------------------------------------------------------------------
# linear algebra and reshaping


def matvec(w, x) -> Tensor:
    """W @ x for a matrix W (out, in) and a vector x (in,)."""
    w, x = as_tensor(w), as_tensor(x)
    _check(w.value.ndim == 2 and x.value.ndim == 1 and w.shape[1] == x.shape[0], f"matvec {w.shape} @ {x.shape}")

    def backward(g):
        if w.requires_grad:
            w._accumulate(np.outer(g, x.value))
        if x.requires_grad:
            x._accumulate(w.value.T @ g)

    return _result(w.value @ x.value, (w, x), backward)


def linear(x, w, b=None) -> Tensor:
    """Row-batched affine map x @ W.T (+ b); x is (N, in), W is (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    _check(x.value.ndim == 2 and w.value.ndim == 2 and x.shape[1] == w.shape[1], f"linear {x.shape} x {w.shape}")
    value = x.value @ w.value.T
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        _check(b.shape == (w.shape[0],), f"bias {b.shape} for {w.shape}")
        value = value + b.value
        parents.append(b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.value)
        if w.requires_grad:
            w._accumulate(g.T @ x.value)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _result(value, parents, backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"shape mismatch: concat {[t.shape for t in ts]}: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(piece)

    return _result(value, ts, backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        a._accumulate(full)

    return _result(a.value[..., start:stop], (a,), backward)


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _result(a.value[index], (a,), backward)


def gather_multi(sources: Sequence[Tensor], source_index, row_index) -> Tensor:
    """Rows picked from several 2-D tensors: out[k] = sources[source_index[k]][row_index[k]]."""
    source_index = np.asarray(source_index, dtype=np.intp)
    row_index = np.asarray(row_index, dtype=np.intp)
    used = np.unique(source_index)
    if len(used) == 1:
        return gather_rows(sources[used[0]], row_index)
    width = sources[used[0]].shape[1]
    value = np.empty((len(row_index), width))
    picks = []
    for s in used:
        sel = np.nonzero(source_index == s)[0]
        value[sel] = sources[s].value[row_index[sel]]
        picks.append((sources[s], sel, row_index[sel]))

    def backward(g):
        for src, sel, rows in picks:
            if src.requires_grad:
                full = np.zeros_like(src.value)
                np.add.at(full, rows, g[sel])
                src._accumulate(full)

    return _result(value, [sources[s] for s in used], backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.value.sum(), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.value.size
    return _result(a.value.mean(), (a,), lambda g: a._accumulate(np.broadcast_to(g / n, a.shape)))


def row_dot(a, b) -> Tensor:
    """Per-row inner product of two (N, D) tensors -> (N,)."""
    a, b = as_tensor(a), as_tensor(b)
    _check(a.shape == b.shape, f"row_dot {a.shape} . {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, None] * b.value)
        if b.requires_grad:
            b._accumulate(g[:, None] * a.value)

    return _result(np.einsum("nd,nd->n", a.value, b.value), (a, b), backward)


def project(x, w) -> Tensor:
    """(N, D) rows times a (D,) vector -> (N,)."""
    x, w = as_tensor(x), as_tensor(w)
    _check(x.value.ndim == 2 and w.shape == (x.shape[1],), f"project {x.shape} . {w.shape}")

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.outer(g, w.value))
        if w.requires_grad:
            w._accumulate(x.value.T @ g)

    return _result(x.value @ w.value, (x, w), backward)


def column(a) -> Tensor:
    """(N,) -> (N, 1)."""
    a = as_tensor(a)
    return _result(a.value[:, None], (a,), lambda g: a._accumulate(g[:, 0]))


# --------------------------------------------------------------------------
# normalisation over groups


def softmax(a) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        a._accumulate(value * (g - (g * value).sum(axis=-1, keepdims=True)))

    return _result(value, (a,), backward)


def segment_softmax(scores, offsets) -> Tensor:
    """Softmax of a flat score vector within contiguous groups.

    ``offsets`` holds the start index of each (non-empty) group.
    """
    scores = as_tensor(scores)
    offsets = np.asarray(offsets, dtype=np.intp)
    counts = np.diff(np.append(offsets, len(scores.value)))
    seg = np.repeat(np.arange(len(offsets)), counts)
    peak = np.maximum.reduceat(scores.value, offsets)
    e = np.exp(scores.value - peak[seg])
    value = e / np.add.reduceat(e, offsets)[seg]

    def backward(g):
        inner = np.add.reduceat(g * value, offsets)
        scores._accumulate(value * (g - inner[seg]))

    return _result(value, (scores,), backward)


def segment_sum(values, offsets) -> Tensor:
    """Sum the rows of ``values`` within contiguous groups -> (groups, D)."""
    values = as_tensor(values)
    offsets = np.asarray(offsets, dtype=np.intp)
    counts = np.diff(np.append(offsets, len(values.value)))
    seg = np.repeat(np.arange(len(offsets)), counts)
    return _result(np.add.reduceat(values.value, offsets, axis=0), (values,),
                   lambda g: values._accumulate(g[seg]))


# --------------------------------------------------------------------------
# gradient checking


def finite_difference_check(params: dict[str, Tensor], loss_fn: Callable[[], Tensor],
                            epsilon: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-6) -> dict:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    The relative error of an entry is |analytic - numeric| divided by the
    larger magnitude of the two, with ``floor`` as the smallest denominator so
    that entries with vanishing gradient are judged on absolute error.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
    per_param = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn().value)
            flat[i] = orig - epsilon
            down = float(loss_fn().value)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * epsilon)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        per_param[name] = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
    worst = max(per_param.values(), default=0.0)
    return {"per_param": per_param, "max_rel_error": worst, "passed": worst < tolerance}

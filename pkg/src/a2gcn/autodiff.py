"""Minimal reverse-mode differentiation over dense numpy arrays.

Only the kernels the recommender needs are provided: row gathers and
scatter-adds for edge-list message passing, segment softmax for per-node
attention, row-wise cosine similarity, and the usual elementwise pieces.
There is no general broadcasting.

Operations are recorded on the innermost active :class:`Tape`::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(matmul(w, w))
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_rows",
    "row_dot",
    "leaky_relu",
    "sigmoid",
    "log_sigmoid",
    "cosine_similarity",
    "softmax",
    "segment_softmax",
    "mean_rows",
    "segment_mean",
    "gather",
    "scatter_add",
    "concat",
    "sum_all",
    "mean_all",
    "square_sum",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A numpy array plus a flag telling the tape whether to track it."""

    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.value)):
            label = self.name or "tensor"
            raise NonFiniteError(f"{label} contains NaN or Inf")
        return self

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tape:
    """Records operations while active; replays them backwards on demand.

    Tapes are thread-local: a tape entered in one thread never sees
    operations from another.
    """

    def __init__(self):
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def watches(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.ops.append((out, inputs, vjp))
        self._tracked.add(id(out))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` w.r.t. each source (zeros if unused)."""
        if target.value.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for out, inputs, vjp in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not self.watches(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.value)) for s in sources]


def _active_tape(inputs: tuple[Tensor, ...]) -> Tape | None:
    stack = _tape_stack()
    if not stack:
        return None
    tape = stack[-1]
    if any(tape.watches(t) for t in inputs):
        return tape
    return None


def _op(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape(inputs)
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _need_same_shape(kernel: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kernel}: shape mismatch {a.shape} vs {b.shape}")


def _need_ndim(kernel: str, t: Tensor, ndim: int) -> None:
    if t.value.ndim != ndim:
        raise ShapeError(f"{kernel}: expected {ndim}-d input, got shape {t.shape}")


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _need_ndim("matmul", a, 2)
    _need_ndim("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _need_same_shape("add", a, b)
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _need_same_shape("sub", a, b)
    return _op(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _need_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def mul_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale row ``i`` of a matrix by ``w[i]``."""
    x, w = _as_tensor(x), _as_tensor(w)
    _need_ndim("mul_rows", x, 2)
    _need_ndim("mul_rows", w, 1)
    if x.shape[0] != w.shape[0]:
        raise ShapeError(f"mul_rows: {x.shape[0]} rows vs {w.shape[0]} weights")
    xv, wv = x.value, w.value
    return _op(xv * wv[:, None], (x, w),
               lambda g: (g * wv[:, None], np.einsum("ij,ij->i", g, xv)))


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of matching rows, shape ``(n,)``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _need_ndim("row_dot", a, 2)
    _need_same_shape("row_dot", a, b)
    av, bv = a.value, b.value
    return _op(np.einsum("ij,ij->i", av, bv), (a, b),
               lambda g: (g[:, None] * bv, g[:, None] * av))


# -- nonlinearities ---------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    xv = x.value
    d = np.where(xv > 0, 1.0, slope).astype(xv.dtype, copy=False)
    return _op(xv * d, (x,), lambda g: (g * d,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid(x.value)
    return _op(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` without underflow for large ``|x|``."""
    x = _as_tensor(x)
    xv = x.value
    out = np.minimum(xv, 0.0) - np.log1p(np.exp(-np.abs(xv)))
    return _op(out, (x,), lambda g: (g * _sigmoid(-xv),))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two ``(n, d)`` matrices, shape ``(n,)``.

    A zero row on either side yields similarity 0 and zero gradient.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _need_ndim("cosine_similarity", a, 2)
    _need_same_shape("cosine_similarity", a, b)
    av, bv = a.value, b.value
    na = np.sqrt(np.einsum("ij,ij->i", av, av))
    nb = np.sqrt(np.einsum("ij,ij->i", bv, bv))
    dot = np.einsum("ij,ij->i", av, bv)
    ok = (na > 0) & (nb > 0)
    inv_a = np.divide(1.0, na, out=np.zeros_like(na), where=ok)
    inv_b = np.divide(1.0, nb, out=np.zeros_like(nb), where=ok)
    cos = dot * inv_a * inv_b

    def vjp(g):
        ga = (g * inv_a * inv_b)[:, None] * bv - (g * cos * inv_a * inv_a)[:, None] * av
        gb = (g * inv_a * inv_b)[:, None] * av - (g * cos * inv_b * inv_b)[:, None] * bv
        return ga, gb

    return _op(cos, (a, b), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax of a 1-d vector."""
    x = _as_tensor(x)
    _need_ndim("softmax", x, 1)
    return segment_softmax(x, np.zeros(x.shape[0], dtype=np.int64), 1)


def segment_softmax(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax taken independently within each segment of a 1-d score vector.

    ``segments[i]`` names the group of ``x[i]``; groups need not be contiguous.
    """
    x = _as_tensor(x)
    _need_ndim("segment_softmax", x, 1)
    segments = np.asarray(segments)
    if segments.shape != x.shape:
        raise ShapeError(f"segment_softmax: {segments.shape} ids for {x.shape} scores")
    xv = x.value
    seg_max = np.full(n_segments, -np.inf, dtype=xv.dtype)
    np.maximum.at(seg_max, segments, xv)
    ex = np.exp(xv - seg_max[segments])
    denom = np.bincount(segments, weights=ex, minlength=n_segments).astype(xv.dtype, copy=False)
    y = ex / denom[segments]

    def vjp(g):
        dots = np.bincount(segments, weights=g * y, minlength=n_segments).astype(xv.dtype, copy=False)
        return (y * (g - dots[segments]),)

    return _op(y, (x,), vjp)


# -- indexing and reductions ------------------------------------------------


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``x[idx]``."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def vjp(g):
        out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _op(x.value[idx], (x,), vjp)


def scatter_add(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` output rows: ``out[idx[i]] += x[i]``."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_add: {idx.shape[0]} indices for {x.shape[0]} rows")
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, idx, x.value)
    return _op(out, (x,), lambda g: (g[idx],))


def segment_mean(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Mean of the rows assigned to each of ``n`` groups; empty groups give 0."""
    idx = np.asarray(idx, dtype=np.int64)
    counts = np.bincount(idx, minlength=n).astype(_as_tensor(x).dtype)
    inv = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    return mul_rows(scatter_add(x, idx, n), Tensor(inv))


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over all rows, returned as a ``(1, d)`` matrix."""
    x = _as_tensor(x)
    _need_ndim("mean_rows", x, 2)
    if x.shape[0] == 0:
        raise ShapeError("mean_rows: no rows")
    return segment_mean(x, np.zeros(x.shape[0], dtype=np.int64), 1)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the first axis."""
    parts = tuple(_as_tensor(p) for p in parts)
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _op(np.concatenate([p.value for p in parts]), parts,
               lambda g: tuple(np.split(g, sizes)))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _op(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.value.size == 0:
        raise ShapeError("mean_all: empty input")
    return scale(sum_all(x), 1.0 / x.value.size)


def square_sum(x: Tensor) -> Tensor:
    """Squared L2 (Frobenius) norm."""
    x = _as_tensor(x)
    xv = x.value
    return _op(np.asarray(np.sum(xv * xv)), (x,), lambda g: (2.0 * g * xv,))


# -- verification -----------------------------------------------------------


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], epsilon: float = 1e-4) -> float:
    """Compare tape gradients against central differences.

    ``fn`` reads the current values of ``params`` and returns a scalar
    Tensor.  Returns the max over every coordinate of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    with Tape() as tape:
        out = fn()
    if not np.all(np.isfinite(out.value)):
        raise NonFiniteError("grad_check: function value is not finite")
    analytic = tape.gradient(out, params)

    worst = 0.0
    for p, ga in zip(params, analytic):
        p.value = np.ascontiguousarray(p.value)
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(fn().value)
            flat[i] = orig - epsilon
            fm = float(fn().value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("grad_check: perturbed function value is not finite")
            numeric = (fp - fm) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst

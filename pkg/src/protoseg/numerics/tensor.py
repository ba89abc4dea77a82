"""Dense float64 tensors with a recording tape for reverse-mode gradients.

A :class:`Tensor` is a thin wrapper over a NumPy array. When any input of an
operation lives on a :class:`Tape`, the operation appends a node holding its
backward rule; :func:`backward` then walks the tape once in reverse order.
Tensors without a tape are plain constants, so the same forward code serves
both training (parameters on a tape) and inference (no recording at all).

Integer index arguments (neighbour tables, cluster assignments, segment ids)
are ordinary NumPy arrays and are never differentiated.
"""
from __future__ import annotations

import weakref
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Row-major float64 array, optionally attached to a tape."""

    # the tape is held weakly: a tape references its tensors, so a strong
    # back-reference would form cycles that keep large arrays alive until
    # the cyclic collector happens to run
    __slots__ = ("data", "_tape", "index", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("leaf tensors must be finite")
        self.data = arr
        self._tape = None
        self.index = -1
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out._tape = None
        out.index = -1
        out.name = None
        return out

    @property
    def tape(self) -> "Tape | None":
        return None if self._tape is None else self._tape()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", tape@{self.index}"
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so every node's inputs precede
    it and the list is already topologically sorted.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._backward: list[BackwardFn | None] = []
        self.params: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self._parents)

    def parameter(self, value, name: str) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(value, name=name)
        self._append(t, (), None)
        self.params[name] = t
        return t

    def _append(self, out: Tensor, parents: tuple, fn: BackwardFn | None) -> None:
        out._tape = weakref.ref(self)
        out.index = len(self._parents)
        self._parents.append(parents)
        self._backward.append(fn)

    def gradient(self, loss: Tensor) -> dict[str, np.ndarray]:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tape parameter.

    Parameters the loss does not depend on receive zero gradients.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: list[np.ndarray | None] = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.data)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        fn = tape._backward[i]
        if g is None or fn is None:
            continue
        parents = tape._parents[i]
        for p, pg in zip(parents, fn(g)):
            if pg is None or not isinstance(p, Tensor) or p.tape is not tape:
                continue
            j = p.index
            if grads[j] is None:
                grads[j] = pg
            else:
                grads[j] = grads[j] + pg
        if i != loss.index:
            grads[i] = None
    out = {}
    for name, t in tape.params.items():
        g = grads[t.index] if t.index <= loss.index else None
        out[name] = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
    return out


# -- plumbing ---------------------------------------------------------------

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(parents: Iterable) -> Tape | None:
    tape = None
    for p in parents:
        if isinstance(p, Tensor) and p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ContractError("operands live on different tapes")
    return tape


def _emit(data: np.ndarray, parents: tuple, fn: BackwardFn) -> Tensor:
    out = Tensor._wrap(data)
    tape = _tape_of(parents)
    if tape is not None:
        tape._append(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def scatter_rows(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values[i]`` into row ``idx[i]`` of an ``n``-row result."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n)[:n]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError("scatter index out of range")
    flat = np.ascontiguousarray(values.reshape(len(idx), -1), dtype=np.float64)
    return _kernels.scatter_add_rows(idx, flat, n).reshape((n,) + values.shape[1:])


# -- elementwise and linear algebra -----------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product; gradients ``g @ b.T`` and ``a.T @ g``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def fn(g):
        return g @ bd.T, ad.T @ g

    return _emit(ad @ bd, (a, b), fn)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    if not 0.0 <= slope < 1.0:
        raise ContractError("slope must lie in [0, 1)")
    out = _kernels.leaky(np.ascontiguousarray(x.data), slope)
    return _emit(out, (x,), lambda g: (_kernels.leaky_backward(np.ascontiguousarray(g), out, slope),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def rsqrt_or_zero(x: Tensor) -> Tensor:
    """``x**-0.5`` where ``x > 0`` and 0 elsewhere (isolated graph nodes)."""
    x = as_tensor(x)
    pos = x.data > 0
    safe = np.where(pos, x.data, 1.0)
    out = np.where(pos, safe ** -0.5, 0.0)
    return _emit(out, (x,), lambda g: (np.where(pos, -0.5 * g * out / safe, 0.0),))


def softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    m, c = logits.shape
    if labels.shape != (m,):
        raise ShapeError(f"expected {m} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c - 1}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = -logp[rows, labels].mean()

    def fn(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / m),)

    return _emit(np.asarray(loss), (logits,), fn)


# -- reductions and reshaping -----------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def max_axis(x: Tensor, axis: int = 1) -> Tensor:
    """Elementwise max over ``axis``; the gradient goes to the first argmax."""
    x = as_tensor(x)
    if x.ndim == 3 and axis == 1:
        out3, arg3 = _kernels.max_mid(np.ascontiguousarray(x.data))
        k = x.shape[1]
        return _emit(out3, (x,), lambda g: (_kernels.max_mid_backward(np.ascontiguousarray(g), arg3, k),))
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis)
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _emit(np.squeeze(out, axis), (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.T, (x,), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, fn)


def take(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` at integer ``idx`` (any index shape); duplicates add up."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    n = x.shape[0]

    def fn(g):
        return (scatter_rows(idx, g.reshape((idx.size,) + x.shape[1:]), n),)

    return _emit(x.data[idx], (x,), fn)


def gather_add(centre: Tensor, nbr: Tensor, idx) -> Tensor:
    """``out[i, j] = nbr[idx[i, j]] + centre[i]`` for a 2-D neighbour table."""
    centre, nbr = as_tensor(centre), as_tensor(nbr)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or centre.ndim != 2 or nbr.ndim != 2 or len(idx) != len(centre):
        raise ShapeError("gather_add needs centre (m, w), nbr (n, w) and idx (m, k)")
    if centre.shape[1] != nbr.shape[1]:
        raise ShapeError(f"widths differ: {centre.shape} vs {nbr.shape}")
    n = nbr.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError("neighbour index out of range")
    out = _kernels.gather_add(np.ascontiguousarray(centre.data), np.ascontiguousarray(nbr.data), idx)

    def fn(g):
        return _kernels.gather_add_backward(np.ascontiguousarray(g), idx, n)

    return _emit(out, (centre, nbr), fn)


def segment_sum(x: Tensor, segments, n_segments: int) -> Tensor:
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.intp)
    if segments.shape != x.shape[:1]:
        raise ShapeError("one segment id per row required")
    out = scatter_rows(segments, x.data, n_segments)
    return _emit(out, (x,), lambda g: (g[segments],))


def segment_mean(x: Tensor, segments, n_segments: int) -> Tensor:
    """Per-segment row means; every segment must be non-empty."""
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.intp)
    counts = np.bincount(segments, minlength=n_segments)[:n_segments].astype(np.float64)
    if np.any(counts == 0):
        raise ContractError("segment_mean over an empty segment")
    inv = (1.0 / counts).reshape((-1,) + (1,) * (x.ndim - 1))
    out = scatter_rows(segments, x.data, n_segments) * inv
    return _emit(out, (x,), lambda g: ((g * inv)[segments],))


# -- distances ---------------------------------------------------------------

def sqdist_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances between rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature widths differ: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    diff = ad[:, None, :] - bd[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def fn(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * ad - g @ bd)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bd - g.T @ ad)
        return ga, gb

    return _emit(out, (a, b), fn)


def pair_sqdist(x: Tensor, rows, cols) -> Tensor:
    """``||x[rows[e]] - x[cols[e]]||^2`` for every listed pair ``e``."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    diff = x.data[rows] - x.data[cols]
    out = np.einsum("ij,ij->i", diff, diff)
    n = x.shape[0]

    def fn(g):
        w = 2.0 * g[:, None] * diff
        return (scatter_rows(rows, w, n) - scatter_rows(cols, w, n),)

    return _emit(out, (x,), fn)

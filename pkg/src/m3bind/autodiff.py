"""Dense float64 tensors with tape-based reverse-mode differentiation.

Usage::

    tape = Tape()
    w = tape.watch(np.array([1.0, 2.0]), key="w")
    loss = mse(w, Tensor(np.zeros(2)))
    grads = backward(tape, loss)      # {node id: ndarray}
    grads[w.node]                     # -> array([1., 2.])

Every primitive checks its output for NaN/Inf and raises
:class:`NonFiniteError` rather than letting poisoned values propagate.
"""
from __future__ import annotations

from typing import Callable, Hashable, Sequence

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    pass


class DimensionError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"row {row} has norm {norm:.3e} (<= 1e-12); cannot normalize")
        self.row = row


NORM_FLOOR = 1e-12


class Tensor:
    """Immutable float64 array, optionally tracked on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data, dtype=np.float64).view()
        _check_finite(arr, "tensor")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node = node

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape=None, node=None) -> "Tensor":
        """Construct from an op result that ``_result`` has already checked."""
        t = cls.__new__(cls)
        if type(arr) is not np.ndarray or arr.dtype != np.float64:
            arr = np.asarray(arr, dtype=np.float64)
        arr = arr.view()
        arr.flags.writeable = False
        t.data, t.tape, t.node = arr, tape, node
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of primitive ops; node ids are topologically ordered."""

    def __init__(self):
        self._parents: list[tuple[int | None, ...]] = []
        self._backward: list[Callable | None] = []
        self._shapes: list[tuple] = []
        self.leaves: dict[Hashable, int] = {}

    def __len__(self):
        return len(self._parents)

    def watch(self, value, key: Hashable | None = None) -> Tensor:
        """Register a leaf (a parameter); ``key`` lets callers find its gradient later."""
        if key is not None and key in self.leaves:
            return Tensor(value, self, self.leaves[key])
        node = self._append((), None, np.shape(value))
        t = Tensor(value, self, node)
        self.leaves[node if key is None else key] = node
        return t

    def _append(self, parents, fn, shape) -> int:
        self._parents.append(parents)
        self._backward.append(fn)
        self._shapes.append(tuple(shape))
        return len(self._parents) - 1

    def grads_by_key(self, grads: dict[int, np.ndarray]) -> dict[Hashable, np.ndarray]:
        return {k: grads[n] for k, n in self.leaves.items()}


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], fn) -> Tensor:
    _check_finite(data, op)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError(f"{op}: inputs recorded on different tapes")
    if tape is None:
        return Tensor._wrap(data)
    parents = tuple(t.node if t.tracked else None for t in inputs)
    node = tape._append(parents, fn, data.shape)
    return Tensor._wrap(data, tape, node)


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _result(A @ B, "matmul", (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a row vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.shape == (a.shape[1],):
        return _result(a.data + b.data, "add", (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, "scale", (x,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes, or tensor times a scalar tensor."""
    A, B = a.data, b.data
    if a.shape == b.shape:
        return _result(A * B, "mul", (a, b), lambda g: (g * B, g * A))
    if B.size == 1 and B.ndim <= 1:
        s = B.reshape(())
        return _result(A * s, "mul", (a, b),
                       lambda g: (g * s, np.reshape((g * A).sum(), B.shape)))
    raise DimensionError(f"mul: shapes {a.shape} and {b.shape} are incompatible")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _result(y, "exp", (x,), lambda g: (g * y,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, "tanh", (x,), lambda g: (g * (1.0 - y * y),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _result(np.ascontiguousarray(x.data.T), "transpose", (x,), lambda g: (g.T,))


def diagonal(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diagonal expects a square matrix, got {x.shape}")
    return _result(np.diagonal(x.data).copy(), "diagonal", (x,), lambda g: (np.diag(g),))


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,),
                   lambda g: (np.full(shape, float(g)),))


def reduce_mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), "mean", (x,),
                   lambda g: (np.full(shape, float(g) / n),))


def _offsets(token_batch) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.fromiter((len(s) for s in token_batch), dtype=np.int64, count=len(token_batch))
    offsets = np.zeros(len(token_batch) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    ids = np.fromiter((t for s in token_batch for t in s), dtype=np.int64, count=int(offsets[-1]))
    return ids, offsets


def gather_rows(table: Tensor, ids) -> Tensor:
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"gather_rows: ids must lie in [0, {V})")
    offsets = np.arange(ids.size + 1, dtype=np.int64)
    data = table.data[ids].copy()
    return _result(data, "gather_rows", (table,),
                   lambda g: (_kernels.embedding_bag_mean_grad(np.ascontiguousarray(g), ids, offsets, V),))


def embedding_bag_mean(table: Tensor, token_batch) -> Tensor:
    """Mean of ``table`` rows over each token sequence (gather + mean pool, fused)."""
    V = table.shape[0]
    for i, seq in enumerate(token_batch):
        if len(seq) == 0:
            raise ValueError(f"token sequence {i} is empty")
    ids, offsets = _offsets(token_batch)
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        bad = int(ids[(ids < 0) | (ids >= V)][0])
        raise IndexError(f"token id {bad} is outside the vocabulary of size {V}")
    tab = np.ascontiguousarray(table.data)
    data = _kernels.embedding_bag_mean(tab, ids, offsets)
    return _result(data, "embedding_bag_mean", (table,),
                   lambda g: (_kernels.embedding_bag_mean_grad(np.ascontiguousarray(g), ids, offsets, V),))


def row_l2_normalize(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"row_l2_normalize expects a matrix, got {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    bad = np.flatnonzero(norms <= NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(int(bad[0]), float(norms[bad[0]]))
    y = x.data / norms[:, None]

    def fn(g):
        return ((g - y * np.einsum("ij,ij->i", g, y)[:, None]) / norms[:, None],)

    return _result(y, "row_l2_normalize", (x,), fn)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects a matrix, got {x.shape}")
    _check_finite(x.data, "log_softmax_rows input")
    out = _kernels.log_softmax_rows(np.ascontiguousarray(x.data))
    return _result(out, "log_softmax_rows", (x,),
                   lambda g: (_kernels.log_softmax_rows_grad(np.ascontiguousarray(g), out),))


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), "mse", (a, b),
                   lambda g: (2.0 * float(g) / n * diff, -2.0 * float(g) / n * diff))


# --------------------------------------------------------------------------
# differentiation
# --------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns gradients for every watched leaf.

    Leaves the loss does not depend on get a zero gradient of their own shape.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        return {n: np.zeros(tape._shapes[n]) for n in tape.leaves.values()}
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(loss.shape)
    for node in range(loss.node, -1, -1):
        g = grads[node]
        fn = tape._backward[node]
        if g is None or fn is None:
            continue
        for parent, pg in zip(tape._parents[node], fn(g)):
            if parent is None or pg is None:
                continue
            grads[parent] = pg if grads[parent] is None else grads[parent] + pg
    out = {}
    for n in tape.leaves.values():
        g = grads[n] if n < len(grads) else None
        out[n] = np.zeros(tape._shapes[n]) if g is None else np.asarray(g, dtype=np.float64)
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad

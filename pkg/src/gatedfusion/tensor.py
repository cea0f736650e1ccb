"""Reverse-mode automatic differentiation over dense float64 tensors.

Values are rank-1 or rank-2 numpy arrays wrapped in :class:`Tensor`.
Operations executed while a :class:`Tape` is active are recorded
define-by-run; :func:`backward` on a scalar result sweeps the tape in
reverse and accumulates gradients into the ``grad`` buffer of every
reachable leaf with ``requires_grad`` set.

A tape and its tensors belong to one thread.  Gradients from tensors
recorded on separate tapes (e.g. one per video) merge by summation into
the shared leaf buffers, so independent tapes may be replayed serially
against the same parameters.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateMaskError, DimensionError

_ACTIVE_TAPES: list["Tape"] = []


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs: tuple, out: "Tensor", bwd: Callable):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tape:
    """Ordered record of operations, usable as a context manager.

    Nodes are appended in execution order, so every node's inputs precede
    it and a single reverse sweep visits them in valid topological order.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def _append(self, inputs: tuple, out: "Tensor", bwd: Callable) -> None:
        out.tape = self
        out.tape_index = len(self.nodes)
        self.nodes.append(TapeNode(inputs, out, bwd))


def _active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """Dense rank-1 or rank-2 float64 array with an optional gradient buffer.

    ``grad`` exists only when ``requires_grad`` is set; it is allocated
    lazily as zeros and accumulates across backward calls until
    :meth:`zero_grad`.  ``tape``/``tape_index`` link an operation result
    back to the tape that recorded it; both are None for leaves.
    """

    __slots__ = ("data", "requires_grad", "_grad", "tape", "tape_index")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are rank 1 or 2, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self._grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.tape_index: Optional[int] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t._grad = None
        t.tape = None
        t.tape_index = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def grad(self) -> Optional[np.ndarray]:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _apply(inputs: tuple, out_data: np.ndarray, bwd: Callable) -> Tensor:
    """Wrap an op result, recording it when gradients can flow to it."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._append(inputs, out, bwd)
    return out


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            g @ bd.T if a.requires_grad else None,
            ad.T @ g if b.requires_grad else None,
        )

    return _apply((a, b), ad @ bd, bwd)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    """Matrix-vector product: rank-2 times rank-1."""
    if a.data.ndim != 2 or x.data.ndim != 1:
        raise DimensionError(f"matvec needs matrix and vector, got {a.shape}, {x.shape}")
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec inner dimensions differ: {a.shape} x {x.shape}")
    ad, xd = a.data, x.data

    def bwd(g):
        return (
            np.outer(g, xd) if a.requires_grad else None,
            ad.T @ g if x.requires_grad else None,
        )

    return _apply((a, x), ad @ xd, bwd)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} needs matching shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _apply((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _apply((a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; gradient routes through the opposite operand."""
    _check_same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _apply((a, b), ad * bd, lambda g: (g * bd, g * ad))


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """Elementwise ``scale * a + shift`` with float constants."""
    return _apply((a,), scale * a.data + shift, lambda g: (scale * g,))


def add_rowvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a rank-1 vector to every row of a rank-2 tensor."""
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"add_rowvec needs [u x d] and [d], got {a.shape}, {b.shape}")
    return _apply((a, b), a.data + b.data, lambda g: (g, g.sum(axis=0)))


def add_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Add a single-element tensor to every entry of ``a``."""
    if s.shape != (1,):
        raise DimensionError(f"add_scalar needs a shape-(1,) addend, got {s.shape}")
    return _apply((a, s), a.data + s.data[0], lambda g: (g, np.array([g.sum()])))


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Scale row i of a rank-2 tensor by the i-th entry of a rank-1 tensor."""
    if a.data.ndim != 2 or s.data.ndim != 1 or a.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_rows needs [u x d] and [u], got {a.shape}, {s.shape}")
    ad, sd = a.data, s.data

    def bwd(g):
        return (g * sd[:, None], (g * ad).sum(axis=1))

    return _apply((a, s), ad * sd[:, None], bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries, as a shape-(1,) tensor."""
    shape = a.shape
    return _apply((a,), np.array([a.data.sum()]), lambda g: (np.full(shape, g[0]),))


# ---------------------------------------------------------------------------
# structural ops


def concat_cols(*parts: Tensor) -> Tensor:
    """Juxtapose tensors along the last axis.

    Rank-2 parts must share their row count; rank-1 parts concatenate into
    a longer vector.  Mixing ranks is an error.
    """
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    ranks = {p.data.ndim for p in parts}
    if len(ranks) != 1:
        raise DimensionError(
            f"concat_cols parts must share rank, got shapes {[p.shape for p in parts]}"
        )
    rank = ranks.pop()
    if rank == 2:
        rows = {p.shape[0] for p in parts}
        if len(rows) != 1:
            raise DimensionError(
                f"concat_cols row counts differ: {[p.shape for p in parts]}"
            )
    widths = [p.shape[-1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        if rank == 2:
            return tuple(
                g[:, offsets[i] : offsets[i + 1]] if p.requires_grad else None
                for i, p in enumerate(parts)
            )
        return tuple(
            g[offsets[i] : offsets[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    out = np.concatenate([p.data for p in parts], axis=-1)
    return _apply(tuple(parts), out, bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return _apply((a,), np.ascontiguousarray(a.data.T), lambda g: (g.T,))


def row(a: Tensor, i: int) -> Tensor:
    """Extract row i of a rank-2 tensor as a rank-1 tensor."""
    if a.data.ndim != 2:
        raise DimensionError(f"row needs a rank-2 tensor, got {a.shape}")
    if not 0 <= i < a.shape[0]:
        raise ContractError(f"row index {i} out of range for shape {a.shape}")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape)
        full[i] = g
        return (full,)

    return _apply((a,), a.data[i].copy(), bwd)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 tensors of equal length into a rank-2 tensor."""
    if not vectors:
        raise ContractError("stack_rows needs at least one vector")
    widths = {v.shape for v in vectors}
    if any(v.data.ndim != 1 for v in vectors) or len(widths) != 1:
        raise DimensionError(
            f"stack_rows needs equal-length vectors, got {[v.shape for v in vectors]}"
        )

    def bwd(g):
        return tuple(g[i] if v.requires_grad else None for i, v in enumerate(vectors))

    return _apply(tuple(vectors), np.stack([v.data for v in vectors]), bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def _d_tanh(y: np.ndarray) -> np.ndarray:
    return 1.0 - y * y


def _d_sigmoid(y: np.ndarray) -> np.ndarray:
    return y * (1.0 - y)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _apply((a,), y, lambda g: (g * _d_tanh(y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)
    return _apply((a,), y, lambda g: (g * _d_sigmoid(y),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _apply((a,), np.maximum(ad, 0.0), lambda g: (g * (ad > 0.0),))


def log_clamped(a: Tensor, floor: float) -> Tensor:
    """Elementwise ``log(max(a, floor))``; gradient is zero where clamped."""
    ad = a.data
    y = np.log(np.maximum(ad, floor))

    def bwd(g):
        return (g * np.where(ad > floor, 1.0 / np.maximum(ad, floor), 0.0),)

    return _apply((a,), y, bwd)


def softmax_rows(a: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax, numerically stabilized by row-max subtraction.

    ``mask`` is a boolean array of the same shape marking positions that
    participate; masked positions come out exactly zero and each row
    normalizes over its unmasked entries.  A row with no unmasked entry
    raises :class:`DegenerateMaskError`.  Rank-1 input is treated as a
    single row.
    """
    ad = a.data
    vec = ad.ndim == 1
    a2 = ad[None, :] if vec else ad
    if mask is None:
        m2 = np.ones_like(a2, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != ad.shape:
            raise DimensionError(f"mask shape {m.shape} differs from input {ad.shape}")
        m2 = m[None, :] if vec else m
    alive = m2.sum(axis=1)
    if np.any(alive == 0):
        bad = int(np.argmin(alive))
        raise DegenerateMaskError(f"softmax row {bad} has every position masked")
    shifted = np.where(m2, a2, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)  # masked entries are exp(-inf) == 0 exactly
    y2 = e / e.sum(axis=1, keepdims=True)
    y = y2[0] if vec else y2

    def bwd(g):
        if vec:
            return (y * (g - np.dot(g, y)),)
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _apply((a,), y, bwd)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss recorded on a tape.

    Populates (accumulates into) ``grad`` of every ``requires_grad`` leaf
    the loss depends on.  Repeated calls without :meth:`Tensor.zero_grad`
    keep accumulating.
    """
    if loss.shape != (1,):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss was not produced on an active tape")
    # gradients of intermediate results flow through this transient map;
    # only leaves (tensors not produced by this tape) accumulate in .grad
    flows: dict[int, np.ndarray] = {id(loss): np.ones(1)}
    for node in reversed(tape.nodes[: loss.tape_index + 1]):
        g = flows.pop(id(node.out), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.bwd(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp.tape is tape:
                key = id(inp)
                prev = flows.get(key)
                flows[key] = ig if prev is None else prev + ig
            else:
                buf = inp.grad
                buf += ig

"""Trainable building blocks: GRU cell, bidirectional GRU, dense, dropout.

Parameter containers are dataclasses of :class:`Tensor` leaves.  Each
exposes ``named()`` yielding ``(name, tensor)`` pairs in a fixed order;
the optimizer, gradient checker, and checkpoint code all walk parameters
through that one path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


def glorot_matrix(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Uniform init with limit sqrt(6 / (rows + cols)); trainable."""
    limit = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)), requires_grad=True)


def glorot_vector(rng: np.random.Generator, n: int) -> Tensor:
    """Uniform init for a weight vector feeding one output unit."""
    limit = np.sqrt(6.0 / (n + 1))
    return Tensor(rng.uniform(-limit, limit, size=n), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class GruCellParams:
    """One direction's recurrent cell.

    W_* map the input, U_* map the previous hidden state, b_* are biases;
    rows of every matrix index the hidden units.
    """

    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, in_size: int, hidden: int, rng: np.random.Generator) -> "GruCellParams":
        return cls(
            W_z=glorot_matrix(rng, hidden, in_size),
            W_r=glorot_matrix(rng, hidden, in_size),
            W_h=glorot_matrix(rng, hidden, in_size),
            U_z=glorot_matrix(rng, hidden, hidden),
            U_r=glorot_matrix(rng, hidden, hidden),
            U_h=glorot_matrix(rng, hidden, hidden),
            b_z=zeros_param(hidden),
            b_r=zeros_param(hidden),
            b_h=zeros_param(hidden),
        )

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    def named(self, prefix: str = ""):
        for field in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"):
            yield prefix + field, getattr(self, field)


@dataclass
class BiGruParams:
    forward_cell: GruCellParams
    backward_cell: GruCellParams

    @classmethod
    def init(cls, in_size: int, hidden: int, rng: np.random.Generator) -> "BiGruParams":
        return cls(
            forward_cell=GruCellParams.init(in_size, hidden, rng),
            backward_cell=GruCellParams.init(in_size, hidden, rng),
        )

    @property
    def hidden_size(self) -> int:
        return self.forward_cell.hidden_size

    def named(self, prefix: str = ""):
        yield from self.forward_cell.named(prefix + "fwd.")
        yield from self.backward_cell.named(prefix + "bwd.")


@dataclass
class DenseParams:
    W: Tensor  # [out x in]
    b: Tensor  # [out]

    @classmethod
    def init(cls, in_size: int, out_size: int, rng: np.random.Generator) -> "DenseParams":
        return cls(W=glorot_matrix(rng, out_size, in_size), b=zeros_param(out_size))

    def named(self, prefix: str = ""):
        yield prefix + "W", self.W
        yield prefix + "b", self.b


def gru_cell_step(cell: GruCellParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """One recurrence step.

    z = σ(W_z·x + U_z·h_prev + b_z)
    r = σ(W_r·x + U_r·h_prev + b_r)
    h̃ = tanh(W_h·x + U_h·(r∘h_prev) + b_h)
    h = (1−z)∘h_prev + z∘h̃
    """
    if x.shape != (cell.input_size,) or h_prev.shape != (cell.hidden_size,):
        raise DimensionError(
            f"gru_cell_step got x {x.shape}, h_prev {h_prev.shape} for a "
            f"({cell.input_size} -> {cell.hidden_size}) cell"
        )
    z = tn.sigmoid(tn.matvec(cell.W_z, x) + tn.matvec(cell.U_z, h_prev) + cell.b_z)
    r = tn.sigmoid(tn.matvec(cell.W_r, x) + tn.matvec(cell.U_r, h_prev) + cell.b_r)
    h_cand = tn.tanh(
        tn.matvec(cell.W_h, x) + tn.matvec(cell.U_h, r * h_prev) + cell.b_h
    )
    return tn.affine(z, -1.0, 1.0) * h_prev + z * h_cand


def bigru_forward(p: BiGruParams, seq: Tensor, mask: np.ndarray) -> Tensor:
    """Bidirectional GRU over a [u x in] sequence.

    Row t of the result is the forward state after positions 0..t joined
    with the backward state after positions u-1..t.  Positions where
    ``mask`` is False yield all-zero rows and leave both recurrent states
    untouched, so padding never leaks into real rows.
    """
    if seq.data.ndim != 2 or seq.shape[0] < 1:
        raise ContractError(f"bigru_forward needs a non-empty [u x in] sequence, got {seq.shape}")
    u = seq.shape[0]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (u,):
        raise DimensionError(f"mask shape {mask.shape} does not match {u} rows")
    h = p.hidden_size
    zero_state = Tensor(np.zeros(h))

    rows = [tn.row(seq, t) for t in range(u)]

    fwd_states: list = [None] * u
    state = zero_state
    for t in range(u):
        if mask[t]:
            state = gru_cell_step(p.forward_cell, rows[t], state)
            fwd_states[t] = state
        else:
            fwd_states[t] = zero_state

    bwd_states: list = [None] * u
    state = zero_state
    for t in range(u - 1, -1, -1):
        if mask[t]:
            state = gru_cell_step(p.backward_cell, rows[t], state)
            bwd_states[t] = state
        else:
            bwd_states[t] = zero_state

    return tn.stack_rows([tn.concat_cols(fwd_states[t], bwd_states[t]) for t in range(u)])


def dense_forward(p: DenseParams, x: Tensor, activation: str = "none") -> Tensor:
    """Affine map x·Wᵀ + b applied row-wise, with optional ReLU."""
    if activation not in ("relu", "none"):
        raise ContractError(f"unknown activation {activation!r}")
    if x.data.ndim != 2 or x.shape[1] != p.W.shape[1]:
        raise DimensionError(
            f"dense_forward got input {x.shape} for weight {p.W.shape}"
        )
    out = tn.add_rowvec(tn.matmul(x, tn.transpose(p.W)), p.b)
    return tn.relu(out) if activation == "relu" else out


def dropout_forward(
    x: Tensor, rate: float, mode: str, rng: np.random.Generator
) -> Tensor:
    """Inverted dropout: in train mode each entry is zeroed with
    probability ``rate`` and survivors are scaled by 1/(1−rate); eval mode
    is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ContractError(f"unknown dropout mode {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * Tensor(keep / (1.0 - rate))

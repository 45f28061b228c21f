"""LSTM and LSTHM cells on the autodiff tape.

Gate weights are stacked row-wise in the order (input, forget, output,
candidate), so ``W`` has shape ``[4 * hidden, input]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError

GATES = ("i", "f", "o", "c")


@dataclass
class CellState:
    h: nc.Tensor
    c: nc.Tensor

    @classmethod
    def zeros(cls, hidden):
        return cls(nc.tensor(np.zeros(hidden)), nc.tensor(np.zeros(hidden)))


@dataclass
class LstmParams:
    W: nc.Tensor
    U: nc.Tensor
    b: nc.Tensor

    @property
    def hidden(self):
        return self.U.shape[1]

    @property
    def input_dim(self):
        return self.W.shape[1]


@dataclass
class LsthmParams(LstmParams):
    V: nc.Tensor | None = None
    modality: str = "?"

    @property
    def cross_dim(self):
        return 0 if self.V is None else self.V.shape[1]


def uniform_fan_in(rng, rows, cols):
    bound = 1.0 / np.sqrt(cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def gate_bias(hidden, forget_bias=1.0):
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return b


def init_lstm(rng, input_dim, hidden, requires_grad=True):
    return LstmParams(
        W=nc.Tensor(uniform_fan_in(rng, 4 * hidden, input_dim), requires_grad),
        U=nc.Tensor(uniform_fan_in(rng, 4 * hidden, hidden), requires_grad),
        b=nc.Tensor(gate_bias(hidden), requires_grad),
    )


def init_lsthm(rng, input_dim, hidden, cross_dim, modality="?", requires_grad=True):
    base = init_lstm(rng, input_dim, hidden, requires_grad)
    V = None
    if cross_dim > 0:
        V = nc.Tensor(uniform_fan_in(rng, 4 * hidden, cross_dim), requires_grad)
    return LsthmParams(base.W, base.U, base.b, V=V, modality=modality)


def _check(params, x, state, where):
    n = params.hidden
    for name, t, want in (("W", params.W, (4 * n, x.shape[0])),
                          ("U", params.U, (4 * n, n)),
                          ("b", params.b, (4 * n,))):
        if t.shape != want:
            raise DimensionError(f"{where}: {name} has shape {t.shape}, expected {want} "
                                 f"(stacked gates {'/'.join(GATES)})")
    if state.h.shape != (n,) or state.c.shape != (n,):
        raise DimensionError(f"{where}: state shape {state.h.shape}/{state.c.shape}, hidden={n}")


def _gate_update(pre, state, n):
    i_pre, f_pre, o_pre, c_bar = nc.split(pre, [n, n, n, n])
    i, f, o = nc.sigmoid(i_pre), nc.sigmoid(f_pre), nc.sigmoid(o_pre)
    c = nc.add(nc.hadamard(f, state.c), nc.hadamard(i, nc.tanh_op(c_bar)))
    h = nc.hadamard(o, nc.tanh_op(c))
    return CellState(h, c)


def lstm_step(params: LstmParams, x, state: CellState) -> CellState:
    x = nc._wrap(x)
    if params.W.shape[1] != x.shape[0]:
        raise DimensionError(f"lstm: input dim {x.shape[0]} but W expects {params.W.shape[1]} (all gates)")
    _check(params, x, state, "lstm")
    pre = nc.add(nc.add(nc.matvec(params.W, x), nc.matvec(params.U, state.h)), params.b)
    return _gate_update(pre, state, params.hidden)


def lsthm_step(params: LsthmParams, x, z_prev, state: CellState) -> CellState:
    """One hybrid-memory step.

    ``z_prev`` is the cross-modal vector of the previous time step; the
    candidate memory is affine and only squashed inside the memory update.
    The freshly computed gates drive the update.
    """
    x = nc._wrap(x)
    where = f"lsthm[{params.modality}]"
    if params.W.shape[1] != x.shape[0]:
        raise DimensionError(f"{where}: input dim {x.shape[0]} but W expects {params.W.shape[1]} (all gates)")
    _check(params, x, state, where)
    pre = nc.add(nc.matvec(params.W, x), nc.matvec(params.U, state.h))
    if params.V is not None:
        z_prev = nc._wrap(z_prev)
        if params.V.shape != (4 * params.hidden, z_prev.shape[0]):
            raise DimensionError(f"{where}: V has shape {params.V.shape}, z has {z_prev.shape}")
        pre = nc.add(pre, nc.matvec(params.V, z_prev))
    pre = nc.add(pre, params.b)
    return _gate_update(pre, state, params.hidden)

"""Multistage fusion: K rounds of attention highlighting and LSTM fusion,
then a summarizing affine+tanh map to the cross-modal vector z."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .cells import CellState, LstmParams, init_lstm, lstm_step, uniform_fan_in
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class MfpParams:
    fuse: LstmParams
    fuse_init_memory: np.ndarray
    sum_W: nc.Tensor
    sum_b: nc.Tensor
    # highlight pieces are None when the attention module is ablated
    mem_W: nc.Tensor | None = None
    mem_b: nc.Tensor | None = None
    highlight: LstmParams | None = None
    proj_W: nc.Tensor | None = None
    proj_b: nc.Tensor | None = None

    @property
    def uses_highlight(self):
        return self.highlight is not None

    @property
    def n_features(self):
        return self.fuse.input_dim

    @property
    def n_stages(self):
        return self.sum_W.shape[1] // self.fuse.hidden


@dataclass
class MfpTrace:
    attention: list = field(default_factory=list)
    highlighted: list = field(default_factory=list)
    stage_outputs: list = field(default_factory=list)
    h_cat: np.ndarray | None = None  # the features the stages attended over


def orthogonal_row(rng, n):
    """One row of a QR-orthogonalized Gaussian matrix (unit norm)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    return q[0].copy()


def init_mfp(rng, n_features, d_hl, d_f, d_z, K, highlight=True, requires_grad=True):
    rg = requires_grad
    p = MfpParams(
        fuse=init_lstm(rng, n_features, d_f, rg),
        fuse_init_memory=orthogonal_row(rng, d_f),
        sum_W=nc.Tensor(uniform_fan_in(rng, d_z, K * d_f), rg),
        sum_b=nc.Tensor(np.zeros(d_z), rg),
    )
    if highlight:
        p.mem_W = nc.Tensor(uniform_fan_in(rng, d_hl, n_features), rg)
        p.mem_b = nc.Tensor(np.zeros(d_hl), rg)
        p.highlight = init_lstm(rng, n_features, d_hl, rg)
        p.proj_W = nc.Tensor(uniform_fan_in(rng, n_features, d_hl), rg)
        p.proj_b = nc.Tensor(np.zeros(n_features), rg)
    return p


def highlight_init(params: MfpParams, h_cat) -> CellState:
    h_cat = nc._wrap(h_cat)
    if params.mem_W.shape[1] != h_cat.shape[0]:
        raise DimensionError(f"memory init map expects {params.mem_W.shape[1]} features, got {h_cat.shape[0]}")
    c = nc.affine(params.mem_W, h_cat, params.mem_b)
    return CellState(nc.tensor(np.zeros(c.shape[0])), c)


def uniform_attention(n):
    return nc.tensor(np.full(n, 1.0 / n))


def highlight_stage(params: MfpParams, state: CellState, prev_attention, h_cat):
    prev_attention = nc._wrap(prev_attention)
    h_cat = nc._wrap(h_cat)
    n = params.n_features
    if prev_attention.shape != (n,) or h_cat.shape != (n,):
        raise DimensionError(f"highlight: expected {n} features, got {prev_attention.shape} and {h_cat.shape}")
    a = prev_attention.data
    if np.any(a < 0) or abs(a.sum() - 1.0) > 1e-6:
        raise ContractError("highlight: previous attention is not a probability vector")
    new_state = lstm_step(params.highlight, prev_attention, state)
    attention = nc.softmax(nc.affine(params.proj_W, new_state.h, params.proj_b))
    return attention, new_state


def apply_highlight(h_cat, attention):
    h_cat, attention = nc._wrap(h_cat), nc._wrap(attention)
    if h_cat.shape != attention.shape:
        raise DimensionError(f"highlight: features {h_cat.shape} vs attention {attention.shape}")
    return nc.hadamard(h_cat, attention)


def fuse_init(params: MfpParams) -> CellState:
    d_f = params.fuse.hidden
    return CellState(nc.tensor(np.zeros(d_f)), nc.tensor(params.fuse_init_memory.copy()))


def fuse_stage(params: MfpParams, state: CellState, h_tilde):
    h_tilde = nc._wrap(h_tilde)
    if h_tilde.shape[0] != params.fuse.input_dim:
        raise DimensionError(f"fuse: expected {params.fuse.input_dim} features, got {h_tilde.shape[0]}")
    new_state = lstm_step(params.fuse, h_tilde, state)
    return new_state.h, new_state


def summarize(params: MfpParams, stage_outputs):
    K = params.n_stages
    if len(stage_outputs) != K:
        raise ContractError(f"summarize: expected {K} stage outputs, got {len(stage_outputs)}")
    return nc.tanh_op(nc.affine(params.sum_W, nc.concat(stage_outputs), params.sum_b))


def run_mfp(params: MfpParams, h_cat, K, capture_trace=False):
    """Fuse one timestep's concatenated modality states into z.

    Returns ``(z, trace)``; ``trace`` is None unless requested. Highlight and
    fuse states start fresh on every call.
    """
    if K < 1:
        raise ConfigError(f"stage count must be >= 1, got {K}")
    if K != params.n_stages:
        raise ConfigError(f"parameters were built for K={params.n_stages}, asked for K={K}")
    h_cat = nc._wrap(h_cat)
    trace = MfpTrace(h_cat=h_cat.data.copy()) if capture_trace else None
    fuse_state = fuse_init(params)
    outputs = []
    if params.uses_highlight:
        hl_state = highlight_init(params, h_cat)
        attention = uniform_attention(params.n_features)
    for _ in range(K):
        if params.uses_highlight:
            attention, hl_state = highlight_stage(params, hl_state, attention, h_cat)
            h_tilde = apply_highlight(h_cat, attention)
        else:
            h_tilde = h_cat
        s, fuse_state = fuse_stage(params, fuse_state, h_tilde)
        outputs.append(s)
        if trace is not None:
            if params.uses_highlight:
                trace.attention.append(attention.data.copy())
            trace.highlighted.append(h_tilde.data.copy())
            trace.stage_outputs.append(s.data.copy())
    return summarize(params, outputs), trace

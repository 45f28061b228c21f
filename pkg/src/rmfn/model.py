"""The assembled network: three LSTHMs, per-timestep multistage fusion,
the final representation E and an affine prediction head.

All trainable tensors live in one flat float64 buffer (``ModelParams.theta``)
with a name -> (offset, shape) registry. The tape forward binds leaf tensors
onto views of that buffer; the fused kernels read it directly.
"""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .cells import CellState, LsthmParams, LstmParams, gate_bias, lsthm_step, uniform_fan_in
from .errors import AlignmentError, ConfigError, DimensionError, ParseError
from .mfp import MfpParams, orthogonal_row, run_mfp

MODALITIES = ("l", "v", "a")
VARIANTS = ("full", "no_mfp", "no_highlight")
TASKS = ("regression", "classification")
CHECKPOINT_FORMAT = "rmfn-checkpoint/1"

# Fixed slot order shared with the fused kernels.
SLOTS = (
    *(f"lsthm.{m}.{p}" for m in MODALITIES for p in ("W", "U", "V", "b")),
    "mfp.mem.W", "mfp.mem.b",
    "mfp.highlight.W", "mfp.highlight.U", "mfp.highlight.b",
    "mfp.proj.W", "mfp.proj.b",
    "mfp.fuse.W", "mfp.fuse.U", "mfp.fuse.b",
    "mfp.summarize.W", "mfp.summarize.b",
    "head.W", "head.b",
)


@dataclass
class ModelConfig:
    d_l: int
    d_v: int
    d_a: int
    h_l: int = 8
    h_v: int = 8
    h_a: int = 8
    d_hl: int = 0  # 0 means "same as the concatenated hidden size"
    d_f: int = 8
    d_z: int = 4
    K: int = 3
    variant: str = "full"
    task: str = "regression"
    n_classes: int = 2
    dropout: float = 0.2
    seed: int = 0

    def validate(self):
        for name in ("d_l", "d_v", "d_a", "h_l", "h_v", "h_a", "d_f", "d_z", "K"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_hl < 0:
            raise ConfigError(f"d_hl must be >= 0, got {self.d_hl}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.task == "classification" and self.n_classes < 2:
            raise ConfigError("classification needs n_classes >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    @property
    def input_dims(self):
        return (self.d_l, self.d_v, self.d_a)

    @property
    def hidden_dims(self):
        return (self.h_l, self.h_v, self.h_a)

    @property
    def n_features(self):
        return self.h_l + self.h_v + self.h_a

    @property
    def uses_mfp(self):
        return self.variant != "no_mfp"

    @property
    def uses_highlight(self):
        return self.variant == "full"

    @property
    def highlight_hidden(self):
        return self.d_hl or self.n_features

    @property
    def cross_dim(self):
        return self.d_z if self.uses_mfp else 0

    @property
    def dim_E(self):
        return self.n_features + self.cross_dim

    @property
    def n_out(self):
        return self.n_classes if self.task == "classification" else 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(config: ModelConfig):
    """Ordered ``(name, shape)`` for every trainable tensor of this variant."""
    c = config
    H, d_z, d_f, d_hl = c.n_features, c.cross_dim, c.d_f, c.highlight_hidden
    shapes = []
    for m, d, h in zip(MODALITIES, c.input_dims, c.hidden_dims):
        shapes += [(f"lsthm.{m}.W", (4 * h, d)), (f"lsthm.{m}.U", (4 * h, h))]
        if c.uses_mfp:
            shapes.append((f"lsthm.{m}.V", (4 * h, d_z)))
        shapes.append((f"lsthm.{m}.b", (4 * h,)))
    if c.uses_highlight:
        shapes += [
            ("mfp.mem.W", (d_hl, H)), ("mfp.mem.b", (d_hl,)),
            ("mfp.highlight.W", (4 * d_hl, H)), ("mfp.highlight.U", (4 * d_hl, d_hl)),
            ("mfp.highlight.b", (4 * d_hl,)),
            ("mfp.proj.W", (H, d_hl)), ("mfp.proj.b", (H,)),
        ]
    if c.uses_mfp:
        shapes += [
            ("mfp.fuse.W", (4 * d_f, H)), ("mfp.fuse.U", (4 * d_f, d_f)), ("mfp.fuse.b", (4 * d_f,)),
            ("mfp.summarize.W", (d_z, c.K * d_f)), ("mfp.summarize.b", (d_z,)),
        ]
    shapes += [("head.W", (c.n_out, c.dim_E)), ("head.b", (c.n_out,))]
    return shapes


class ModelParams:
    """Flat parameter buffer plus registry. ``params[name]`` is a view."""

    def __init__(self, config: ModelConfig, theta=None, buffers=None):
        self.config = config
        self.layout = {}
        offset = 0
        for name, shape in param_shapes(config):
            self.layout[name] = (offset, shape)
            offset += int(np.prod(shape))
        if theta is None:
            theta = np.zeros(offset)
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (offset,):
            raise DimensionError(f"parameter buffer has {theta.shape}, registry needs ({offset},)")
        self.theta = theta
        self.buffers = dict(buffers or {})

    @property
    def names(self):
        return list(self.layout)

    @property
    def n_params(self):
        return self.theta.size

    def __contains__(self, name):
        return name in self.layout

    def __getitem__(self, name):
        off, shape = self.layout[name]
        return self.theta[off:off + int(np.prod(shape))].reshape(shape)

    def view(self, flat, name):
        """Same registry slot, but in another flat buffer (e.g. a gradient)."""
        off, shape = self.layout[name]
        return flat[off:off + int(np.prod(shape))].reshape(shape)

    def copy(self):
        return ModelParams(self.config, self.theta.copy(), {k: v.copy() for k, v in self.buffers.items()})

    def slot_offsets(self):
        return np.array([self.layout[s][0] if s in self.layout else -1 for s in SLOTS], dtype=np.int64)

    def bind(self):
        """Leaf tensors over views of ``theta`` for a tape forward pass."""
        return BoundModel(self)


class BoundModel:
    def __init__(self, params: ModelParams):
        self.params = params
        cfg = params.config
        self.leaves = {n: nc.Tensor(params[n], requires_grad=True, name=n) for n in params.names}
        L = self.leaves
        self.lsthm = [
            LsthmParams(L[f"lsthm.{m}.W"], L[f"lsthm.{m}.U"], L[f"lsthm.{m}.b"],
                        V=L.get(f"lsthm.{m}.V"), modality=m)
            for m in MODALITIES
        ]
        self.mfp = None
        if cfg.uses_mfp:
            self.mfp = MfpParams(
                fuse=LstmParams(L["mfp.fuse.W"], L["mfp.fuse.U"], L["mfp.fuse.b"]),
                fuse_init_memory=params.buffers["mfp.fuse_init_memory"],
                sum_W=L["mfp.summarize.W"], sum_b=L["mfp.summarize.b"],
            )
            if cfg.uses_highlight:
                self.mfp.mem_W, self.mfp.mem_b = L["mfp.mem.W"], L["mfp.mem.b"]
                self.mfp.highlight = LstmParams(L["mfp.highlight.W"], L["mfp.highlight.U"], L["mfp.highlight.b"])
                self.mfp.proj_W, self.mfp.proj_b = L["mfp.proj.W"], L["mfp.proj.b"]
        self.head_W, self.head_b = L["head.W"], L["head.b"]

    def zero_grad(self):
        for t in self.leaves.values():
            t.zero_grad()

    def flat_grad(self):
        g = np.zeros_like(self.params.theta)
        for name, leaf in self.leaves.items():
            self.params.view(g, name)[...] = leaf.grad
        return g


def build_variant(config: ModelConfig) -> ModelParams:
    """Freshly initialized parameters for ``config.variant`` (seeded by ``config.seed``)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = ModelParams(config)
    for name, shape in param_shapes(config):
        view = params[name]
        if len(shape) == 2:
            view[...] = uniform_fan_in(rng, *shape)
        elif name.startswith("lsthm.") or name.startswith("mfp.highlight.") or name.startswith("mfp.fuse."):
            view[...] = gate_bias(shape[0] // 4)
        else:
            view[...] = 0.0
    if config.uses_mfp:
        params.buffers["mfp.fuse_init_memory"] = orthogonal_row(rng, config.d_f)
    return params


def check_example(config: ModelConfig, example):
    seqs = (example.x_l, example.x_v, example.x_a)
    lengths = {len(s) for s in seqs}
    if len(lengths) != 1:
        raise AlignmentError(f"example {example.id}: modality lengths differ {[len(s) for s in seqs]}")
    if lengths == {0}:
        raise AlignmentError(f"example {example.id}: empty sequence")
    for m, s, d in zip(MODALITIES, seqs, config.input_dims):
        if np.shape(s)[1] != d:
            raise DimensionError(f"example {example.id}: modality {m} has dim {np.shape(s)[1]}, config says {d}")
    return lengths.pop()


def forward(params, config, example, mode="eval", capture_trace=False, mask=None, rng=None, bound=None):
    """Tape forward for one example.

    Returns ``(prediction, E, traces)``. ``traces`` is a list of per-step
    :class:`MfpTrace` when requested (None otherwise). In train mode the
    dropout mask is taken from ``mask`` or drawn from ``rng``.
    """
    T = check_example(config, example)
    b = bound if bound is not None else params.bind()
    seqs = (example.x_l, example.x_v, example.x_a)
    states = [CellState.zeros(h) for h in config.hidden_dims]
    z = nc.tensor(np.zeros(config.d_z)) if config.uses_mfp else None
    traces = [] if capture_trace else None
    for t in range(T):
        states = [lsthm_step(b.lsthm[m], nc.tensor(seqs[m][t]), z, states[m]) for m in range(3)]
        if config.uses_mfp:
            h_cat = nc.concat([s.h for s in states])
            z, tr = run_mfp(b.mfp, h_cat, config.K, capture_trace)
            if traces is not None:
                traces.append(tr)
    E = nc.concat([s.h for s in states] + ([z] if z is not None else []))
    head_in = E
    if mode == "train" and config.dropout > 0:
        if mask is None:
            mask = nc.dropout_mask(config.dim_E, config.dropout, rng or np.random.default_rng())
        head_in = nc.hadamard(E, mask)
    elif mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return nc.affine(b.head_W, head_in, b.head_b), E, traces


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s, shape):
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if arr.size != int(np.prod(shape)):
        raise ParseError(f"expected {int(np.prod(shape))} values, found {arr.size}")
    return arr.reshape(shape)


def save_checkpoint(path, params: ModelParams, epoch=0, extra=None):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": params.config.to_dict(),
        "epoch": int(epoch),
        "tensors": [{"name": n, "shape": list(s), "data": _b64(params[n])} for n, (_, s) in params.layout.items()],
        "buffers": [{"name": n, "shape": list(v.shape), "data": _b64(v)} for n, v in params.buffers.items()],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path):
    """Returns ``(params, meta)`` where meta holds ``epoch`` and ``extra``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: not a checkpoint ({e})") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    config = ModelConfig.from_dict(doc["config"]).validate()
    params = ModelParams(config)
    seen = set()
    for rec in doc["tensors"]:
        name = rec["name"]
        if name not in params.layout:
            raise ParseError(f"{path}: tensor {name!r} not in the registry for this config")
        shape = tuple(rec["shape"])
        if shape != params.layout[name][1]:
            raise ParseError(f"{path}: tensor {name!r} has shape {shape}, expected {params.layout[name][1]}")
        params[name][...] = _unb64(rec["data"], shape)
        seen.add(name)
    missing = set(params.layout) - seen
    if missing:
        raise ParseError(f"{path}: missing tensors {sorted(missing)}")
    for rec in doc.get("buffers", []):
        params.buffers[rec["name"]] = _unb64(rec["data"], tuple(rec["shape"]))
    return params, {"epoch": doc.get("epoch", 0), "extra": doc.get("extra", {})}

"""Word-aligned multimodal examples: synthetic generation, interval
alignment of raw streams, and the tab-separated dataset file."""
from __future__ import annotations

import base64
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, ParseError, ValidationError

log = logging.getLogger(__name__)

INTERACTIONS = ("synchronized", "asynchronous", "bimodal")


@dataclass
class MultimodalExample:
    x_l: np.ndarray  # [T, d_l]
    x_v: np.ndarray  # [T, d_v]
    x_a: np.ndarray  # [T, d_a]
    label: float | int
    id: str = ""

    @property
    def T(self):
        return len(self.x_l)

    @property
    def dims(self):
        return (self.x_l.shape[1], self.x_v.shape[1], self.x_a.shape[1])

    def __eq__(self, other):
        if not isinstance(other, MultimodalExample):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and type(self.label) is type(other.label)
                and all(np.array_equal(a, b) for a, b in
                        zip((self.x_l, self.x_v, self.x_a), (other.x_l, other.x_v, other.x_a))))


@dataclass
class RawStream:
    timestamps: np.ndarray
    frames: np.ndarray  # [n_frames, d]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim == 1:
            self.frames = self.frames[:, None]
        if len(self.timestamps) != len(self.frames):
            raise ValidationError(f"{len(self.timestamps)} timestamps for {len(self.frames)} frames")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("stream timestamps must be strictly increasing")


@dataclass
class WordInterval:
    word_index: int
    start: float
    end: float


def align_expectation(stream: RawStream, intervals):
    """Average the frames falling in each word interval ``[start, end)``.

    Returns ``(features[n_words, d], n_empty)``; words with no frames get a
    zero vector and are counted in ``n_empty``. Column sums are exact
    (``math.fsum``), so the result does not depend on frame order.
    """
    prev_end = -math.inf
    for i, w in enumerate(intervals):
        if not w.start < w.end:
            raise ValidationError(f"interval {i} (word {w.word_index}): start {w.start} >= end {w.end}")
        if w.start < prev_end:
            raise ValidationError(f"interval {i} (word {w.word_index}) overlaps or precedes its predecessor")
        prev_end = w.end
    d = stream.frames.shape[1]
    out = np.zeros((len(intervals), d))
    n_empty = 0
    lo = np.searchsorted(stream.timestamps, [w.start for w in intervals], side="left")
    hi = np.searchsorted(stream.timestamps, [w.end for w in intervals], side="left")
    for i, (a, b) in enumerate(zip(lo, hi)):
        if b <= a:
            n_empty += 1
            continue
        block = stream.frames[a:b]
        out[i] = [math.fsum(block[:, j]) / (b - a) for j in range(d)]
    if n_empty:
        log.warning("%d of %d word intervals contained no frames", n_empty, len(intervals))
    return out, n_empty


@dataclass
class GeneratorSpec:
    n_examples: int = 1000
    T: int = 6
    dims: tuple = (4, 4, 4)
    task: str = "regression"
    interaction: str = "synchronized"
    sigma: float = 0.1
    seed: int = 0
    n_classes: int = 2
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")
        if self.T < 2:
            raise ConfigError(f"sequence length must be >= 2, got {self.T}")
        if self.n_examples < 0:
            raise ConfigError("n_examples must be >= 0")
        if self.interaction not in INTERACTIONS:
            raise ConfigError(f"unknown interaction {self.interaction!r}; choose from {INTERACTIONS}")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ConfigError("classification needs n_classes >= 2")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive ints, got {self.dims}")
        return self


def interaction_score(x_l, x_v, x_a, interaction):
    """Noise-free label, built only from cross-modal products of feature 0.

    * synchronized: sum_t l[t] v[t] / sqrt(T)
    * asynchronous: sum_{t>=1} (l[t] v[t-1] + v[t] a[t-1]) / sqrt(2 (T-1))
    * bimodal:      sum_t l[t] a[t] / sqrt(T)

    Features are i.i.d. standard normal, so every score has unit variance and
    its conditional mean given any single modality is zero.
    """
    l, v, a = x_l[:, 0], x_v[:, 0], x_a[:, 0]
    T = len(l)
    if interaction == "synchronized":
        return float(np.dot(l, v) / np.sqrt(T))
    if interaction == "asynchronous":
        return float((np.dot(l[1:], v[:-1]) + np.dot(v[1:], a[:-1])) / np.sqrt(2 * (T - 1)))
    if interaction == "bimodal":
        return float(np.dot(l, a) / np.sqrt(T))
    raise ConfigError(f"unknown interaction {interaction!r}")


def class_edges(n_classes, sigma):
    """Equal-mass bin edges for a N(0, 1 + sigma^2) noisy score."""
    q = norm.ppf(np.arange(1, n_classes) / n_classes)
    return q * np.sqrt(1.0 + sigma ** 2)


def label_from_score(score, spec: GeneratorSpec, noise=0.0):
    y = score + spec.sigma * noise
    if spec.task == "regression":
        return float(y)
    return int(np.searchsorted(class_edges(spec.n_classes, spec.sigma), y, side="left"))


def gen_synthetic(spec: GeneratorSpec):
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d_l, d_v, d_a = spec.dims
    width = len(str(max(spec.n_examples - 1, 0)))
    out = []
    for i in range(spec.n_examples):
        x_l = rng.standard_normal((spec.T, d_l))
        x_v = rng.standard_normal((spec.T, d_v))
        x_a = rng.standard_normal((spec.T, d_a))
        noise = rng.standard_normal()
        label = label_from_score(interaction_score(x_l, x_v, x_a, spec.interaction), spec, noise)
        out.append(MultimodalExample(x_l, x_v, x_a, label, id=f"{spec.interaction[:4]}-{i:0{width}d}"))
    return out


def split_dataset(examples, fractions=(0.7, 0.15, 0.15)):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(examples)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return examples[:n_train], examples[n_train:n_train + n_val], examples[n_train + n_val:]


def _enc(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _dec(text, T, d, rec):
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as e:
        raise ParseError(f"bad base64 payload ({e})", rec) from None
    if len(raw) != 8 * T * d:
        raise ParseError(f"payload has {len(raw)} bytes, expected {8 * T * d}", rec)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(T, d)


def format_record(ex: MultimodalExample):
    d_l, d_v, d_a = ex.dims
    if isinstance(ex.label, (int, np.integer)):
        label = str(int(ex.label))
    else:
        label = repr(float(ex.label))
    if "\t" in ex.id or "\n" in ex.id:
        raise ValidationError(f"example id {ex.id!r} contains a tab or newline")
    return "\t".join([ex.id, label, str(ex.T), f"{d_l},{d_v},{d_a}",
                      _enc(ex.x_l), _enc(ex.x_v), _enc(ex.x_a)])


def parse_record(line, rec):
    parts = line.split("\t")
    if len(parts) != 7:
        raise ParseError(f"expected 7 tab-separated fields, found {len(parts)}", rec)
    ex_id, label_s, T_s, dims_s, bl, bv, ba = parts
    try:
        T = int(T_s)
        dims = [int(x) for x in dims_s.split(",")]
    except ValueError:
        raise ParseError(f"bad length or dims field {T_s!r} / {dims_s!r}", rec) from None
    if len(dims) != 3 or T < 0 or min(dims) < 1:
        raise ParseError(f"bad shape header T={T_s} dims={dims_s}", rec)
    stripped = label_s.lstrip("-")
    try:
        label = int(label_s) if stripped.isdigit() else float(label_s)
    except ValueError:
        raise ParseError(f"bad label {label_s!r}", rec) from None
    xs = [_dec(b, T, d, rec) for b, d in zip((bl, bv, ba), dims)]
    return MultimodalExample(xs[0], xs[1], xs[2], label, id=ex_id)


def save_dataset(path, examples):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="ascii", newline="\n") as fh:
        for ex in examples:
            fh.write(format_record(ex) + "\n")
    os.replace(tmp, path)


def load_dataset(path):
    text = Path(path).read_text(encoding="ascii")
    if text and not text.endswith("\n"):
        n = text.count("\n")
        raise ParseError("file is truncated (last record has no line terminator)", n)
    return [parse_record(line, i) for i, line in enumerate(text.splitlines())]

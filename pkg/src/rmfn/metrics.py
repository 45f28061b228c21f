"""Binned accuracy, binary F1, MAE and Pearson correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError, ValidationError

A2_EDGES = (0.0,)
A7_EDGES = (-2.5, -1.5, -0.5, 0.5, 1.5, 2.5)


def _pair(preds, targets):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise ValidationError("no samples")
    return p, t


def bin_values(x, bin_edges):
    """Bin index per value; bins are right-closed, ``(e[k-1], e[k]]``."""
    return np.searchsorted(np.asarray(bin_edges, dtype=np.float64), x, side="left")


def accuracy_c(preds, targets, c, bin_edges):
    p, t = _pair(preds, targets)
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.size != c - 1:
        raise ValidationError(f"{c} classes need {c - 1} bin edges, got {edges.size}")
    if np.any(np.diff(edges) < 0):
        raise ValidationError("bin edges must be sorted")
    return float(np.mean(bin_values(p, edges) == bin_values(t, edges)))


def accuracy_2(preds, targets):
    return accuracy_c(preds, targets, 2, A2_EDGES)


def accuracy_7(preds, targets):
    """Seven unit-width sentiment bins on [-3, 3] (round to nearest, clamp)."""
    return accuracy_c(preds, targets, 7, A7_EDGES)


def f1_binary(preds, targets, return_flag=False):
    """F1 of the positive class. With no positives at all, F1 is 0.0 and the
    degenerate flag (second element when ``return_flag``) is set."""
    p = np.asarray(preds, dtype=bool).ravel()
    t = np.asarray(targets, dtype=bool).ravel()
    if p.shape != t.shape:
        raise ValidationError(f"length mismatch: {p.size} vs {t.size}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    degenerate = tp + fp + fn == 0
    if degenerate or tp == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return (f1, degenerate) if return_flag else f1


def mae(preds, targets):
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def pearson_r(preds, targets):
    p, t = _pair(preds, targets)
    if p.size < 2:
        raise UndefinedMetricError("correlation needs at least two samples")
    dp = p - p.mean()
    dt = t - t.mean()
    mp, mt = np.max(np.abs(dp)), np.max(np.abs(dt))
    if mp == 0.0 or mt == 0.0:
        raise UndefinedMetricError("correlation undefined: a vector has zero variance")
    dp, dt = dp / mp, dt / mt
    # one square root of the product keeps r(x, x) == 1 exact
    r = float(np.dot(dp, dt)) / math.sqrt(float(np.dot(dp, dp)) * float(np.dot(dt, dt)))
    return max(-1.0, min(1.0, r))


@dataclass
class EvalResult:
    metrics: dict
    n: int
    flags: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.metrics[key]

    def to_dict(self):
        return {"n": self.n, **self.metrics, **({"flags": self.flags} if self.flags else {})}


def evaluate_predictions(task, preds, targets, n_classes=2):
    """Metric set for a task.

    regression: mae, corr, acc2, f1 (positive vs non-positive), acc7.
    classification: acc (argmax), plus f1 when there are two classes.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets)
    n = len(targets)
    if n == 0:
        raise ValidationError("cannot evaluate an empty dataset")
    flags = []
    if task == "regression":
        p = preds.reshape(n)
        t = targets.astype(np.float64)
        out = {"mae": mae(p, t), "acc2": accuracy_2(p, t), "acc7": accuracy_7(p, t)}
        try:
            out["corr"] = pearson_r(p, t)
        except UndefinedMetricError:
            out["corr"] = float("nan")
            flags.append("corr_undefined")
        f1, degenerate = f1_binary(p > 0, t > 0, return_flag=True)
        out["f1"] = f1
        if degenerate:
            flags.append("f1_no_positives")
        return EvalResult(out, n, flags)
    cls = np.argmax(preds.reshape(n, -1), axis=1)
    t = targets.astype(np.int64)
    out = {"acc": float(np.mean(cls == t))}
    if n_classes == 2:
        f1, degenerate = f1_binary(cls == 1, t == 1, return_flag=True)
        out["f1"] = f1
        if degenerate:
            flags.append("f1_no_positives")
    return EvalResult(out, n, flags)

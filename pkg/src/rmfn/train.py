"""Losses, Adam, the training loop and the finite-difference gradient checker."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractError, NumericalError
from .kernels import pack_inputs, run_batch
from .metrics import evaluate_predictions
from .model import forward

log = logging.getLogger(__name__)


def loss_regression(pred, target):
    """L1 loss ``|pred - target|`` as a shape-[1] tensor."""
    pred = nc._wrap(pred)
    return nc.sum_op(nc.abs_op(nc.sub(pred, nc.tensor(np.full(pred.shape, float(target))))))


def _check_distribution(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ContractError(f"target is not a probability vector (sum={p.sum():.6g})")
    return p


def loss_classification(logits, target_dist):
    """Cross-entropy of a (soft) target distribution against softmax(logits)."""
    target = _check_distribution(target_dist.data if isinstance(target_dist, nc.Tensor) else target_dist)
    logits = nc._wrap(logits)
    if logits.shape != target.shape:
        raise ContractError(f"logits {logits.shape} vs target {target.shape}")
    return nc.scale(nc.dot(nc.tensor(target), nc.log_softmax(logits)), -1.0)


def soft_targets(class_id, c, smoothing=0.1):
    if c < 2:
        raise ConfigError(f"soft targets need at least 2 classes, got {c}")
    if not 0 <= class_id < c:
        raise ConfigError(f"class {class_id} out of range for {c} classes")
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    t = np.full(c, smoothing / (c - 1))
    t[class_id] = 1.0 - smoothing
    return nc.tensor(t)


def task_targets(config, examples, smoothing=0.0):
    if config.task == "regression":
        return np.array([[float(ex.label)] for ex in examples]).reshape(len(examples), 1)
    c = config.n_classes
    return np.array([soft_targets(int(ex.label), c, smoothing).data for ex in examples]).reshape(len(examples), c)


def example_loss(params, config, example, mode="eval", mask=None, bound=None, smoothing=0.0):
    """Tape loss for one example (the reference path used by grad_check)."""
    pred, _, _ = forward(params, config, example, mode=mode, mask=mask, bound=bound)
    if config.task == "regression":
        return loss_regression(pred, example.label)
    return loss_classification(pred, soft_targets(int(example.label), config.n_classes, smoothing))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper):
        n = params.theta.size
        return cls(np.zeros(n), np.zeros(n), **hyper)


def adam_step(state: AdamState, params, grads):
    """In-place Adam update of ``params.theta``.

    ``grads`` is either a flat array matching ``theta`` or a mapping from
    registry name to gradient; a mapping must cover every parameter.
    """
    if isinstance(grads, dict):
        g = np.zeros_like(params.theta)
        for name in params.names:
            if name not in grads or grads[name] is None:
                raise ContractError(f"no gradient for parameter {name!r}")
            params.view(g, name)[...] = grads[name]
    else:
        if grads is None:
            raise ContractError("no gradient supplied")
        g = np.asarray(grads, dtype=np.float64)
        if g.shape != params.theta.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameters {params.theta.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite gradient")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params.theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    smoothing: float = 0.1
    patience: int = 20
    seed: int = 0
    restore_best: bool = True

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and patience >= 1 required")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val: dict
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("nan")
    select_metric: str = ""
    stopped_early: bool = False
    checkpoint: str | None = None

    @property
    def losses(self):
        return [e.train_loss for e in self.epochs]

    def to_lines(self):
        lines = [json.dumps({"type": "epoch", **asdict(e)}) for e in self.epochs]
        lines.append(json.dumps({"type": "summary", "best_epoch": self.best_epoch,
                                 "best_score": self.best_score, "select_metric": self.select_metric,
                                 "stopped_early": self.stopped_early, "checkpoint": self.checkpoint,
                                 "n_epochs": len(self.epochs)}))
        return lines

    def write(self, path):
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")


def selection_metric(config):
    """(name, sign): the validation metric early stopping watches; higher sign*value is better."""
    return ("mae", -1.0) if config.task == "regression" else ("acc", 1.0)


def predict(params, examples, batch_size=256):
    """Eval-mode predictions ``[n, n_out]`` and attention ``[n, T_max, K, n_features]``."""
    cfg = params.config
    X, L = pack_inputs(examples)
    targets = np.zeros((len(examples), cfg.n_out))
    preds = np.zeros((len(examples), cfg.n_out))
    atts = np.zeros((len(examples), X.shape[1], cfg.K, cfg.n_features))
    for s in range(0, len(examples), batch_size):
        sl = slice(s, s + batch_size)
        _, _, preds[sl], atts[sl] = run_batch(params, X[sl], L[sl], targets[sl], want_grad=False)
    return preds, atts


def evaluate(params, examples):
    cfg = params.config
    preds, _ = predict(params, examples)
    return evaluate_predictions(cfg.task, preds, [ex.label for ex in examples], cfg.n_classes)


def train(params, train_set, val_set, tcfg: TrainConfig, log_path=None, adam=None, start_epoch=0,
          on_epoch=None):
    """Minibatch Adam on the fused kernels, with early stopping.

    Deterministic given ``tcfg.seed``: one generator drives both the shuffle
    order and the dropout masks. Returns ``(report, adam_state)``; with
    ``restore_best`` the parameters end at the best validation epoch.
    """
    tcfg.validate()
    cfg = params.config
    if not train_set:
        raise ConfigError("training split is empty")
    adam = adam or AdamState.for_params(params, lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    rng = np.random.default_rng(tcfg.seed + start_epoch)
    X, L = pack_inputs(train_set)
    Y = task_targets(cfg, train_set, tcfg.smoothing)
    metric, sign = selection_metric(cfg)
    report = TrainReport(select_metric=metric)
    best_theta = params.theta.copy()
    best = -np.inf
    stale = 0
    n = len(train_set)
    for epoch in range(start_epoch + 1, start_epoch + tcfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        per_example = np.zeros(n)
        for s in range(0, n, tcfg.batch_size):
            idx = order[s:s + tcfg.batch_size]
            if cfg.dropout > 0:
                keep = rng.random((len(idx), cfg.dim_E)) >= cfg.dropout
                masks = keep / (1.0 - cfg.dropout)
            else:
                masks = None
            losses, grad, _, _ = run_batch(params, X[idx], L[idx], Y[idx], masks)
            if not np.all(np.isfinite(losses)):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            adam_step(adam, params, grad / len(idx))
            per_example[idx] = losses
        val = evaluate(params, val_set).to_dict() if val_set else {}
        # indexed by example, so the reported mean does not depend on the shuffle order
        rec = EpochRecord(epoch, math.fsum(per_example) / n, val, time.perf_counter() - t0)
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d loss %.5f val %s", epoch, rec.train_loss, val)
        score = sign * val[metric] if val else -rec.train_loss
        if score > best:
            best, stale = score, 0
            best_theta[:] = params.theta
            report.best_epoch = epoch
            report.best_score = float(sign * score) if val else float(rec.train_loss)
        else:
            stale += 1
            if stale >= tcfg.patience:
                report.stopped_early = True
                break
    if tcfg.restore_best and report.epochs:
        params.theta[:] = best_theta
    if log_path is not None:
        report.write(log_path)
    return report, adam


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float
    n_coords: int

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    @property
    def failing(self):
        return [n for n, e in self.errors.items() if e >= self.tolerance]

    def table(self):
        width = max(len(n) for n in self.errors) if self.errors else 4
        rows = [f"{'tensor':<{width}}  max_rel_err  status"]
        for n, e in self.errors.items():
            rows.append(f"{n:<{width}}  {e:11.3e}  {'ok' if e < self.tolerance else 'FAIL'}")
        return "\n".join(rows)


def tape_gradient(params, example):
    b = params.bind()
    loss = example_loss(params, params.config, example, bound=b)
    nc.backward(loss)
    return b.flat_grad()


def kernel_gradient(params, example):
    cfg = params.config
    X, L = pack_inputs([example])
    _, g, _, _ = run_batch(params, X, L, task_targets(cfg, [example]))
    return g


def grad_check(params, example, step=5e-4, tolerance=1e-4, analytic=tape_gradient):
    """Central differences of the eval-mode tape loss against ``analytic``.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``; the
    report keeps the maximum per registry tensor.
    """
    cfg = params.config
    a = analytic(params, example)
    theta = params.theta
    errors = {}
    for name in params.names:
        off, shape = params.layout[name]
        worst = 0.0
        for j in range(off, off + int(np.prod(shape))):
            orig = theta[j]
            theta[j] = orig + step
            fp = example_loss(params, cfg, example).data[0]
            theta[j] = orig - step
            fm = example_loss(params, cfg, example).data[0]
            theta[j] = orig
            num = (fp - fm) / (2.0 * step)
            rel = abs(a[j] - num) / max(abs(a[j]), abs(num), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return GradCheckReport(errors, tolerance, theta.size)

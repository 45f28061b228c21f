"""Train several model variants over several seeds and tabulate them."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .model import ModelConfig, build_variant
from .train import TrainConfig, evaluate, train

COLUMNS = {
    "regression": ("acc2", "f1", "acc7", "mae", "corr"),
    "classification": ("acc", "f1"),
}
HEADERS = {"acc2": "A2", "f1": "F1", "acc7": "A7", "mae": "MAE", "corr": "Corr", "acc": "Acc"}


@dataclass
class RunResult:
    label: str
    seed: int
    n_params: int
    val: dict
    test: dict | None
    best_epoch: int
    seconds: float
    params: object = None


@dataclass
class AblationResult:
    task: str
    runs: list = field(default_factory=list)

    def labels(self):
        seen = []
        for r in self.runs:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def values(self, label, metric, split="val"):
        return np.array([getattr(r, split)[metric] for r in self.runs if r.label == label])

    def mean(self, label, metric, split="val"):
        return float(np.nanmean(self.values(label, metric, split)))

    def table(self, split="val", percent=True):
        """Markdown table of per-variant means (accuracies in percent)."""
        cols = [c for c in COLUMNS[self.task] if any(c in getattr(r, split, {}) for r in self.runs)]
        head = "| Model | params | " + " | ".join(HEADERS[c] for c in cols) + " |"
        rows = [head, "|" + "---|" * (len(cols) + 2)]
        for label in self.labels():
            n_params = next(r.n_params for r in self.runs if r.label == label)
            cells = []
            for c in cols:
                m = self.mean(label, c, split)
                if c in ("mae", "corr"):
                    cells.append(f"{m:.3f}")
                else:
                    cells.append(f"{100 * m:.1f}" if percent else f"{m:.3f}")
            rows.append(f"| {label} | {n_params} | " + " | ".join(cells) + " |")
        return "\n".join(rows)

    def tsv(self):
        metrics = COLUMNS[self.task]
        lines = ["\t".join(["label", "seed", "n_params", "best_epoch", "seconds"]
                           + [f"val_{m}" for m in metrics] + [f"test_{m}" for m in metrics])]
        for r in self.runs:
            vals = [f"{r.val.get(m, float('nan')):.6g}" for m in metrics]
            tests = [f"{r.test.get(m, float('nan')):.6g}" if r.test else "" for m in metrics]
            lines.append("\t".join([r.label, str(r.seed), str(r.n_params), str(r.best_epoch),
                                    f"{r.seconds:.2f}"] + vals + tests))
        return "\n".join(lines) + "\n"


def standard_variants(base: ModelConfig, k_max=0):
    """(label, config) pairs: full, no_mfp, no_highlight, and RMFN-R1..R{k_max}."""
    out = [("RMFN", replace(base, variant="full")),
           ("RMFN (no MFP)", replace(base, variant="no_mfp")),
           ("RMFN (no HIGHLIGHT)", replace(base, variant="no_highlight"))]
    out += [(f"RMFN-R{k}", replace(base, variant="full", K=k)) for k in range(1, k_max + 1)]
    return out


def stage_variants(base: ModelConfig, ks):
    return [(f"RMFN-R{k}", replace(base, variant="full", K=k)) for k in ks]


def run_ablation(variants, train_set, val_set, tcfg: TrainConfig, seeds, test_set=None, progress=None,
                 keep_params=False):
    """Train every ``(label, config)`` once per seed; model and data order both follow the seed.

    With ``keep_params`` each :class:`RunResult` also holds its trained parameters.
    """
    task = variants[0][1].task
    result = AblationResult(task)
    for label, cfg in variants:
        for seed in seeds:
            t0 = time.perf_counter()
            params = build_variant(replace(cfg, seed=seed))
            report, _ = train(params, train_set, val_set, replace(tcfg, seed=seed))
            val = evaluate(params, val_set).to_dict()
            test = evaluate(params, test_set).to_dict() if test_set else None
            run = RunResult(label, seed, params.n_params, val, test, report.best_epoch,
                            time.perf_counter() - t0, params if keep_params else None)
            result.runs.append(run)
            if progress is not None:
                progress(run)
    return result

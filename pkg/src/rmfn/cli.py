"""Command-line front end.

Every subcommand reads its section of an INI file (``--config``), applies
``--key value`` overrides on top, and writes the resolved settings next to
its outputs. Exit codes: 0 ok, 1 usage, 2 validation, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation as abl
from .data import GeneratorSpec, gen_synthetic, load_dataset, save_dataset, split_dataset
from .errors import ConfigError, RmfnError, ValidationError
from .model import MODALITIES, ModelConfig, build_variant, load_checkpoint, save_checkpoint
from .train import AdamState, TrainConfig, evaluate, grad_check, predict, train

log = logging.getLogger("rmfn")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3

MODEL_KEYS = {"h_l": 8, "h_v": 8, "h_a": 8, "d_hl": 0, "d_f": 8, "d_z": 4, "K": 3, "variant": "full",
              "task": "regression", "n_classes": 2, "dropout": 0.2, "seed": 0}
OPTIM_KEYS = {"epochs": 100, "batch_size": 16, "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
              "smoothing": 0.1, "patience": 20}

DEFAULTS = {
    "gen": {"out": "data", "n_examples": 1000, "T": 6, "d_l": 4, "d_v": 4, "d_a": 4,
            "task": "regression", "interaction": "synchronized", "sigma": 0.1, "seed": 0,
            "n_classes": 2, "split": "0.7,0.15,0.15", "force": False},
    "train": {"data": "data", "out": "run", "resume": "", **MODEL_KEYS, **OPTIM_KEYS},
    "eval": {"checkpoint": "run/model.ckpt", "data": "data/test.tsv", "out": ""},
    "trace": {"checkpoint": "run/model.ckpt", "data": "data/val.tsv", "ids": "", "slice": "0:1",
              "out": "trace.csv"},
    "gradcheck": {"d_m": 2, "h_m": 3, "d_f": 4, "d_z": 3, "K": 2, "T": 3, "variant": "full",
                  "task": "regression", "n_classes": 2, "seed": 0, "step": 5e-4, "tolerance": 1e-4},
    "ablate": {"data": "data", "out": "ablation", "seeds": "0,1,2,3,4", "k_max": 6, "include_test": False,
               **MODEL_KEYS, **OPTIM_KEYS},
}


def _coerce(value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        v = str(value).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"expected {type(default).__name__}, got {value!r}") from None
    return str(value)


def parse_overrides(tokens):
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            val = tokens[i + 1]
            i += 2
        else:
            val, i = "true", i + 1
        out[key] = val
    return out


def resolve(command, config_path, overrides):
    defaults = DEFAULTS[command]
    cfg = dict(defaults)
    if config_path:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        if not parser.read(config_path):
            raise ConfigError(f"cannot read config file {config_path}")
        if parser.has_section(command):
            for k, v in parser.items(command):
                if k not in defaults:
                    raise ConfigError(f"[{command}] unknown key {k!r}")
                cfg[k] = _coerce(v, defaults[k])
    for k, v in overrides.items():
        if k not in defaults:
            raise ConfigError(f"{command}: unknown option --{k}")
        cfg[k] = _coerce(v, defaults[k])
    return cfg


def write_resolved(path, command, cfg):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser[command] = {k: str(v) for k, v in cfg.items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _floats(text):
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def cmd_gen(cfg):
    out = Path(cfg["out"])
    names = [out / f"{s}.tsv" for s in ("train", "val", "test")]
    if any(p.exists() for p in names) and not cfg["force"]:
        raise ValidationError(f"{out} already holds a dataset; pass --force to overwrite")
    spec = GeneratorSpec(n_examples=cfg["n_examples"], T=cfg["T"], dims=(cfg["d_l"], cfg["d_v"], cfg["d_a"]),
                         task=cfg["task"], interaction=cfg["interaction"], sigma=cfg["sigma"],
                         seed=cfg["seed"], n_classes=cfg["n_classes"])
    fractions = _floats(cfg["split"])
    spec.validate()
    parts = split_dataset(gen_synthetic(spec), fractions)
    out.mkdir(parents=True, exist_ok=True)
    for path, part in zip(names, parts):
        save_dataset(path, part)
        print(f"wrote {len(part)} examples to {path}")
    write_resolved(out / "gen.resolved.ini", "gen", cfg)
    return EXIT_OK


def _load_split(data, name):
    path = Path(data)
    if path.is_dir():
        path = path / f"{name}.tsv"
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_dataset(path)


def _check_labels(config, examples, where):
    if not examples:
        raise ValidationError(f"{where}: dataset is empty")
    ints = all(isinstance(ex.label, (int, np.integer)) for ex in examples)
    if config.task == "classification":
        if not ints:
            raise ValidationError(f"{where}: classification model but labels are not class ids")
        bad = [ex.label for ex in examples if not 0 <= ex.label < config.n_classes]
        if bad:
            raise ValidationError(f"{where}: class ids {sorted(set(bad))[:5]} outside [0, {config.n_classes})")
    elif ints:
        raise ValidationError(f"{where}: regression model but labels are integer class ids")
    dims = examples[0].dims
    if dims != config.input_dims:
        raise ValidationError(f"{where}: data dims {dims} do not match model dims {config.input_dims}")


def _model_config(cfg, dims):
    return ModelConfig(d_l=dims[0], d_v=dims[1], d_a=dims[2],
                       **{k: cfg[k] for k in MODEL_KEYS}).validate()


def _train_config(cfg):
    return TrainConfig(**{k: cfg[k] for k in OPTIM_KEYS}, seed=cfg["seed"]).validate()


def cmd_train(cfg):
    train_set = _load_split(cfg["data"], "train")
    val_set = _load_split(cfg["data"], "val")
    if not train_set:
        raise ConfigError("training split is empty")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    start_epoch, adam = 0, None
    if cfg["resume"]:
        params, meta = load_checkpoint(cfg["resume"])
        start_epoch = int(meta["epoch"])
        st = meta["extra"].get("adam")
        if st:
            adam = AdamState(np.array(st["m"]), np.array(st["v"]), st["t"], st["lr"],
                             st["beta1"], st["beta2"], st["eps"])
        print(f"resuming from {cfg['resume']} at epoch {start_epoch}")
    else:
        params = build_variant(_model_config(cfg, train_set[0].dims))
    mcfg = params.config
    _check_labels(mcfg, train_set, "train")
    if val_set:
        _check_labels(mcfg, val_set, "val")
    tcfg = _train_config(cfg)
    print(f"variant={mcfg.variant} K={mcfg.K} parameters={params.n_params}")

    def show(rec):
        extra = " ".join(f"{k}={v:.4f}" for k, v in rec.val.items() if isinstance(v, float))
        print(f"epoch {rec.epoch:4d} loss {rec.train_loss:.5f} {extra}")

    report, adam = train(params, train_set, val_set, tcfg, adam=adam, start_epoch=start_epoch, on_epoch=show)
    ckpt = out / "model.ckpt"
    last_epoch = report.epochs[-1].epoch if report.epochs else start_epoch
    save_checkpoint(ckpt, params, epoch=last_epoch, extra={"adam": {
        "m": adam.m.tolist(), "v": adam.v.tolist(), "t": adam.t, "lr": adam.lr,
        "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}})
    report.checkpoint = str(ckpt)
    report.write(out / "train.log")
    write_resolved(out / "train.resolved.ini", "train", cfg)
    print(f"best epoch {report.best_epoch} ({report.select_metric}={report.best_score:.4f}); saved {ckpt}")
    return EXIT_OK


def cmd_eval(cfg):
    params, _ = load_checkpoint(cfg["checkpoint"])
    data = load_dataset(cfg["data"]) if Path(cfg["data"]).exists() else None
    if data is None:
        raise FileNotFoundError(f"dataset file not found: {cfg['data']}")
    _check_labels(params.config, data, "eval")
    result = evaluate(params, data)
    text = json.dumps(result.to_dict(), sort_keys=True)
    print(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text + "\n")
        write_resolved(Path(cfg["out"]).with_suffix(".resolved.ini"), "eval", cfg)
    return EXIT_OK


def modality_of_feature(config):
    """Modality tag for each index of the concatenated hidden vector."""
    return [m for m, h in zip(MODALITIES, config.hidden_dims) for _ in range(h)]


def trace_rows(params, examples):
    cfg = params.config
    if not cfg.uses_highlight:
        raise ValidationError(f"variant {cfg.variant!r} has no attention to trace")
    _, att = predict(params, examples)
    tags = modality_of_feature(cfg)
    for e, ex in enumerate(examples):
        for t in range(ex.T):
            for k in range(cfg.K):
                for j, w in enumerate(att[e, t, k]):
                    yield ex.id, t + 1, k + 1, j, tags[j], repr(float(w))


def select_examples(data, ids, sl):
    if ids:
        wanted = [s.strip() for s in ids.split(",") if s.strip()]
        by_id = {ex.id: ex for ex in data}
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ValidationError(f"unknown example ids: {missing}")
        return [by_id[i] for i in wanted]
    try:
        a, b = (int(x) if x else None for x in sl.split(":"))
    except ValueError:
        raise ConfigError(f"slice must look like start:stop, got {sl!r}") from None
    chosen = data[a:b]
    if not chosen:
        raise ValidationError(f"slice {sl!r} selects no examples")
    return chosen


def cmd_trace(cfg):
    params, _ = load_checkpoint(cfg["checkpoint"])
    data = load_dataset(cfg["data"])
    chosen = select_examples(data, cfg["ids"], cfg["slice"])
    out = Path(cfg["out"])
    n = 0
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_id", "t", "stage", "feature_index", "modality", "weight"])
        for row in trace_rows(params, chosen):
            w.writerow(row)
            n += 1
    write_resolved(out.with_suffix(".resolved.ini"), "trace", cfg)
    print(f"wrote {n} attention rows for {len(chosen)} examples to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg):
    d, h = cfg["d_m"], cfg["h_m"]
    mcfg = ModelConfig(d_l=d, d_v=d, d_a=d, h_l=h, h_v=h, h_a=h, d_f=cfg["d_f"], d_z=cfg["d_z"],
                       K=cfg["K"], variant=cfg["variant"], task=cfg["task"], n_classes=cfg["n_classes"],
                       dropout=0.0, seed=cfg["seed"])
    params = build_variant(mcfg)
    spec = GeneratorSpec(n_examples=1, T=cfg["T"], dims=(d, d, d), task=cfg["task"],
                         n_classes=cfg["n_classes"], seed=cfg["seed"] + 1)
    report = grad_check(params, gen_synthetic(spec)[0], step=cfg["step"], tolerance=cfg["tolerance"])
    print(report.table())
    print(f"max relative error {report.max_error:.3e} over {report.n_coords} coordinates "
          f"(tolerance {report.tolerance:g}): {'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        print("failing tensors: " + ", ".join(report.failing))
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_ablate(cfg):
    train_set = _load_split(cfg["data"], "train")
    val_set = _load_split(cfg["data"], "val")
    test_set = _load_split(cfg["data"], "test") if cfg["include_test"] else None
    base = _model_config(cfg, train_set[0].dims)
    _check_labels(base, train_set, "train")
    tcfg = _train_config(cfg)
    seeds = _ints(cfg["seeds"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    def show(run):
        print(f"{run.label:<22} seed {run.seed}  " + " ".join(
            f"{k}={v:.4f}" for k, v in run.val.items() if isinstance(v, float)))

    result = abl.run_ablation(abl.standard_variants(base, cfg["k_max"]), train_set, val_set, tcfg, seeds,
                              test_set=test_set, progress=show)
    table = result.table()
    (out / "ablation.md").write_text(table + "\n")
    (out / "ablation.tsv").write_text(result.tsv())
    write_resolved(out / "ablate.resolved.ini", "ablate", cfg)
    print(table)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "trace": cmd_trace,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="rmfn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default="", help="INI file with a section per command")
    parser.add_argument("-v", "--verbose", action="store_true")
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args.config, parse_overrides(rest))
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE if "unknown option" in str(e) else EXIT_VALIDATION
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except RmfnError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())

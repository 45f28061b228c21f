import configparser
import csv
import json
from collections import defaultdict
from functools import partial

import pytest

from rmfn import cli
from rmfn.data import load_dataset
from rmfn.model import load_checkpoint
from rmfn.train import grad_check, tape_gradient

SMALL = ["--T", "3", "--d_l", "2", "--d_v", "2", "--d_a", "2"]
MICRO = ["--h_l", "3", "--h_v", "3", "--h_a", "3", "--d_f", "4", "--d_z", "3", "--K", "2"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def data_dir(tmp_path, capsys):
    d = tmp_path / "data"
    code, _, _ = run(capsys, "gen", "--out", d, "--n_examples", 40, *SMALL)
    assert code == 0
    return d


def test_gen_default_counts(tmp_path, capsys):
    d = tmp_path / "d"
    code, out, _ = run(capsys, "gen", "--out", d)
    assert code == 0
    assert [len(load_dataset(d / f"{s}.tsv")) for s in ("train", "val", "test")] == [700, 150, 150]
    ids = [ex.id for s in ("train", "val", "test") for ex in load_dataset(d / f"{s}.tsv")]
    assert len(set(ids)) == 1000
    resolved = configparser.ConfigParser()
    resolved.read(d / "gen.resolved.ini")
    assert resolved["gen"]["n_examples"] == "1000"


def test_gen_is_reproducible_and_refuses_overwrite(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen", "--out", a, "--n_examples", 20, "--seed", 4)[0] == 0
    assert run(capsys, "gen", "--out", b, "--n_examples", 20, "--seed", 4)[0] == 0
    assert (a / "train.tsv").read_bytes() == (b / "train.tsv").read_bytes()
    before = (a / "val.tsv").read_bytes()
    code, _, err = run(capsys, "gen", "--out", a, "--n_examples", 20, "--seed", 5)
    assert code == 2 and "--force" in err
    assert (a / "val.tsv").read_bytes() == before
    assert run(capsys, "gen", "--out", a, "--n_examples", 20, "--seed", 5, "--force")[0] == 0
    assert (a / "val.tsv").read_bytes() != before


def test_gen_bad_split(tmp_path, capsys):
    code, _, err = run(capsys, "gen", "--out", tmp_path / "x", "--split", "0.5,0.3,0.3")
    assert code == 2 and "sum" in err


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "gen", "--no_such_key", "1")[0] == 1


def test_config_file_with_overrides(tmp_path, capsys):
    ini = tmp_path / "run.ini"
    ini.write_text("[gen]\nn_examples = 10\nT = 2\nseed = 9\n")
    code, out, _ = run(capsys, "--config", ini, "gen", "--out", tmp_path / "d", "--n_examples", 20)
    assert code == 0
    assert len(load_dataset(tmp_path / "d" / "train.tsv")) == 14
    assert load_dataset(tmp_path / "d" / "train.tsv")[0].T == 2


def test_train_prints_parameter_counts(tmp_path, capsys, data_dir):
    counts = {}
    for variant in ("full", "no_mfp", "no_highlight"):
        code, out, _ = run(capsys, "train", "--data", data_dir, "--out", tmp_path / variant, "--epochs", 1,
                           "--variant", variant, *MICRO)
        assert code == 0
        counts[variant] = int(out.split("parameters=")[1].split()[0])
    assert counts == {"full": 1452, "no_highlight": 588, "no_mfp": 226}
    run_dir = tmp_path / "full"
    assert (run_dir / "model.ckpt").exists() and (run_dir / "train.resolved.ini").exists()
    log = [json.loads(x) for x in (run_dir / "train.log").read_text().splitlines()]
    assert log[-1]["type"] == "summary"


def test_zero_lr_gives_constant_loss(tmp_path, capsys, data_dir):
    code, _, _ = run(capsys, "train", "--data", data_dir, "--out", tmp_path / "r", "--epochs", 3,
                     "--lr", 0, "--dropout", 0, "--patience", 10, *MICRO)
    assert code == 0
    losses = [json.loads(x)["train_loss"] for x in (tmp_path / "r" / "train.log").read_text().splitlines()[:-1]]
    assert len(losses) == 3 and len(set(losses)) == 1


def test_resume_continues_epoch_counter(tmp_path, capsys, data_dir):
    first = tmp_path / "first"
    assert run(capsys, "train", "--data", data_dir, "--out", first, "--epochs", 2, "--patience", 50, *MICRO)[0] == 0
    _, meta = load_checkpoint(first / "model.ckpt")
    assert meta["epoch"] == 2 and meta["extra"]["adam"]["t"] > 0
    second = tmp_path / "second"
    code, out, _ = run(capsys, "train", "--data", data_dir, "--out", second, "--epochs", 2, "--patience", 50,
                       "--resume", first / "model.ckpt")
    assert code == 0 and "resuming" in out
    epochs = [json.loads(x).get("epoch") for x in (second / "train.log").read_text().splitlines()[:-1]]
    assert epochs == [3, 4]
    assert load_checkpoint(second / "model.ckpt")[1]["epoch"] == 4


def test_missing_dataset(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nowhere", "--out", tmp_path / "r")
    assert code == 2 and "not found" in err


def test_eval_is_deterministic(tmp_path, capsys, data_dir):
    run(capsys, "train", "--data", data_dir, "--out", tmp_path / "r", "--epochs", 1, *MICRO)
    ckpt = tmp_path / "r" / "model.ckpt"
    code1, out1, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", data_dir / "test.tsv")
    code2, out2, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", data_dir / "test.tsv",
                         "--out", tmp_path / "m.json")
    assert code1 == code2 == 0 and out1 == out2
    metrics = json.loads(out1)
    assert {"mae", "acc2", "acc7", "corr", "f1"} <= set(metrics)
    assert (tmp_path / "m.json").read_text().strip() == out1.strip()


def test_eval_errors(tmp_path, capsys, data_dir):
    run(capsys, "train", "--data", data_dir, "--out", tmp_path / "r", "--epochs", 1, *MICRO)
    ckpt = tmp_path / "r" / "model.ckpt"
    (tmp_path / "empty.tsv").write_text("")
    code, out, err = run(capsys, "eval", "--checkpoint", ckpt, "--data", tmp_path / "empty.tsv")
    assert code == 2 and out == "" and "empty" in err
    cls = tmp_path / "cls"
    run(capsys, "gen", "--out", cls, "--n_examples", 20, "--task", "classification", *SMALL)
    code, _, err = run(capsys, "eval", "--checkpoint", ckpt, "--data", cls / "test.tsv")
    assert code == 2 and "class ids" in err


def test_trace_csv(tmp_path, capsys, data_dir):
    run(capsys, "train", "--data", data_dir, "--out", tmp_path / "r", "--epochs", 1, *MICRO)
    out = tmp_path / "trace.csv"
    code, _, _ = run(capsys, "trace", "--checkpoint", tmp_path / "r" / "model.ckpt",
                     "--data", data_dir / "val.tsv", "--slice", "0:4", "--out", out)
    assert code == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    n, T, K, H = 4, 3, 2, 9
    assert len(rows) == n * T * K * H
    groups = defaultdict(float)
    for r in rows:
        groups[r["example_id"], r["t"], r["stage"]] += float(r["weight"])
        assert r["modality"] == "lva"[int(r["feature_index"]) // 3]
    assert len(groups) == n * T * K
    assert all(abs(s - 1.0) <= 1e-9 for s in groups.values())
    assert {r["t"] for r in rows} == {"1", "2", "3"} and {r["stage"] for r in rows} == {"1", "2"}

    code, _, err = run(capsys, "trace", "--checkpoint", tmp_path / "r" / "model.ckpt",
                       "--data", data_dir / "val.tsv", "--ids", "nope", "--out", out)
    assert code == 2 and "nope" in err


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--variant", "no_highlight")
    assert code == 0
    assert "max_rel_err" in out and "mfp.fuse.W" in out and "PASS" in out


def test_gradcheck_reports_a_broken_gradient(capsys, monkeypatch):
    def broken(params, example):
        g = tape_gradient(params, example)
        params.view(g, "head.W")[...] *= -1.0
        return g

    monkeypatch.setattr(cli, "grad_check", partial(grad_check, analytic=broken))
    code, out, _ = run(capsys, "gradcheck", "--variant", "no_mfp")
    assert code == 3
    assert "failing tensors: head.W" in out


def test_ablate_writes_tables(tmp_path, capsys, data_dir):
    out = tmp_path / "abl"
    code, stdout, _ = run(capsys, "ablate", "--data", data_dir, "--out", out, "--seeds", "0", "--k_max", 2,
                          "--epochs", 1, *MICRO)
    assert code == 0
    table = (out / "ablation.md").read_text().splitlines()
    labels = [line.split("|")[1].strip() for line in table[2:]]
    assert labels == ["RMFN", "RMFN (no MFP)", "RMFN (no HIGHLIGHT)", "RMFN-R1", "RMFN-R2"]
    assert len((out / "ablation.tsv").read_text().splitlines()) == 6

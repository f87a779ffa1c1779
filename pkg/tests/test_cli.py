import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from roma import cli, harness
from roma.pretrain import UnstableTrainingError
from roma.proxy import read_checkpoint
from roma.tasks import LabeledDataset

FAST = ["--epochs", "2", "--steps", "3", "--candidates", "4", "--adapt-steps", "2"]


@pytest.fixture(autouse=True)
def _fresh_caches():
    harness.clear_caches()
    yield
    harness.clear_caches()


def test_parse_seeds():
    assert cli.parse_seeds("0-3") == (0, 1, 2, 3)
    assert cli.parse_seeds("0,5, 7") == (0, 5, 7)
    assert cli.parse_seeds([2, 1]) == (2, 1)
    with pytest.raises(ValueError):
        cli.parse_seeds("")


def test_make_task_pretrain_solve(tmp_path):
    data, ckpt, log = tmp_path / "d.dat", tmp_path / "p.ckpt", tmp_path / "log.csv"
    assert cli.main(["make-task", "--task", "rough-ridge", "--out", str(data),
                     "--csv", str(tmp_path / "d.csv")]) == 0
    assert len(LabeledDataset.load(data)) == 800
    assert cli.main(["pretrain", "--dataset", str(data), "--epochs", "2", "--out", str(ckpt),
                     "--log", str(log)]) == 0
    header, nets = read_checkpoint(ckpt)
    assert header["meta"]["task"] == "rough-ridge" and nets["proxy"].input_dim == 4
    assert len(list(csv.DictReader(open(log)))) == 2
    out = tmp_path / "solve"
    assert cli.main(["solve", "--checkpoint", str(ckpt), "--dataset", str(data), "--steps", "3",
                     "--candidates", "5", "--adapt-steps", "2", "--out", str(out)]) == 0
    sols = np.loadtxt(out / "solutions.csv", delimiter=",")
    assert sols.shape == (5, 4)
    rows = list(csv.DictReader(open(out / "candidates.csv")))
    assert len(rows) == 5 * 4
    assert json.loads((out / "solve_config.json").read_text())["steps"] == 3


def test_discrete_pretrain_and_solve(tmp_path, monkeypatch):
    from roma import vae as V
    real = V.VaeConfig
    monkeypatch.setattr(cli, "VaeConfig", lambda **kw: real(epochs=2, **kw))
    ckpt = tmp_path / "m.ckpt"
    assert cli.main(["pretrain", "--task", "motif-seq", "--epochs", "1", "--out", str(ckpt)]) == 0
    assert (tmp_path / "m.ckpt.vae").exists()
    out = tmp_path / "s"
    assert cli.main(["solve", "--checkpoint", str(ckpt), "--steps", "2", "--candidates", "3",
                     "--adapt-steps", "2", "--out", str(out)]) == 0
    sols = np.loadtxt(out / "solutions.csv", delimiter=",")
    assert sols.shape == (3, 32) and np.all(sols.reshape(3, 8, 4).sum(axis=2) == 1)


def test_run_with_flags_and_report(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["run", "--task", "quadratic-bowl", "--method", "grad-ascent", "--seeds",
                     "0-1", "--alpha", "0.5", "--epsilon", "0.01", "--eta0", "0.002",
                     "--trust-n", "3", "--sigma-in", "0.05", "--adapt-scope", "shared-batch",
                     "--out", str(out)] + FAST)
    assert code == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert rows[0]["method"] == "grad-ascent" and rows[0]["seeds"] == "2"
    rec = harness.load_records(out / "quadratic-bowl__grad-ascent.json")[0]
    assert rec.config["solve"]["alpha"] == 0.5 and rec.config["solve"]["trust_N"] == 3
    assert rec.config["pretrain"]["input_noise_std"] == 0.05
    assert rec.config["solve"]["adapt_scope"] == "shared-batch"
    rep = tmp_path / "rep"
    assert cli.main(["report", str(out / "records.json"), "--out", str(rep)]) == 0
    again = list(csv.DictReader(open(rep / "summary.csv")))
    assert again[0]["p100_mean"] == rows[0]["p100_mean"]


def test_run_from_config_file(tmp_path):
    cfg = {"task": "plateau-cliff", "method": "roma", "seeds": [3], "epochs": 2, "steps": 2,
           "candidates": 4, "adapt_steps": 2, "out": str(tmp_path / "o")}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["run", "--config", str(path), "--steps", "3"]) == 0
    rec = harness.load_records(tmp_path / "o" / "plateau-cliff__roma.json")[0]
    assert rec.config["seeds"] == [3] and rec.config["solve"]["steps"] == 3


def test_sweep_alpha_eps(tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--task", "quadratic-bowl", "--seeds", "0", "--out", str(out)]
                    + FAST) == 0
    rows = list(csv.reader(open(out / "sweep_table.csv")))
    assert [r[0] for r in rows] == ["hyperparam", "(a0, e0)", "(0.1a0, e0)", "(a0, 0.2e0)",
                                    "(0.1a0, 0.2e0)"]


def test_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["run", "--task", "nope"]) == cli.EXIT_USAGE
    assert cli.main(["run", "--method", "roma"]) == cli.EXIT_USAGE
    assert cli.main(["frobnicate"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text('{"task": "quadratic-bowl", "colour": 1}')
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_USAGE
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_IO
    assert cli.main(["solve", "--checkpoint", str(tmp_path / "none.ckpt")]) == cli.EXIT_IO
    blocker = tmp_path / "f"
    blocker.write_text("")
    assert cli.main(["make-task", "--task", "quadratic-bowl",
                     "--out", str(blocker / "x.dat")]) == cli.EXIT_IO

    def unstable(ds, cfg, monitor=None):
        raise UnstableTrainingError(cfg.epsilon, 4)

    monkeypatch.setattr(harness, "pretrain", unstable)
    assert cli.main(["run", "--task", "quadratic-bowl", "--seeds", "0"] + FAST) == cli.EXIT_UNSTABLE


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "roma", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("pretrain", "solve", "run", "sweep", "report", "make-task"):
        assert sub in out.stdout

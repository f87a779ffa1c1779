import csv
import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roma import harness as H
from roma.pretrain import PretrainConfig, UnstableTrainingError
from roma.solver import SolveConfig
from roma.tasks import OracleSealedError, UsageError, normalize_score
from roma.vae import VaeConfig

TINY_P = PretrainConfig(hidden=8, epochs=4, batch_size=64, inner_steps=3)
TINY_S = SolveConfig(steps=6, adapt_steps=3, candidate_count=8)


def tiny(task="quadratic-bowl", method="roma", seeds=(0, 1), **kw):
    kw.setdefault("pretrain", TINY_P)
    kw.setdefault("solve", TINY_S)
    return H.ExperimentConfig(task=task, method=method, seeds=seeds, **kw)


@pytest.fixture(autouse=True)
def _fresh_caches():
    H.clear_caches()
    yield
    H.clear_caches()


# -- metrics -------------------------------------------------------------------------

def test_percentile_examples():
    s = np.arange(1, 129)
    assert H.percentile_score(s, 100) == 128
    assert H.percentile_score(s, 50) == 64
    assert H.percentile_score(np.full(7, 2.5), 37) == 2.5
    assert H.percentile_score([3.0], 0) == 3.0
    assert H.percentile_score(s, 50, rule="linear") == pytest.approx(64.5)
    with pytest.raises(UsageError):
        H.percentile_score([], 50)
    with pytest.raises(UsageError):
        H.percentile_score(s, 101)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.floats(0.01, 100))
def test_percentile_nearest_rank_property(scores, q):
    v = H.percentile_score(scores, q)
    s = sorted(scores)
    k = math.ceil(q / 100 * len(s) - 1e-12)
    assert v == s[max(k, 1) - 1]
    assert sum(x <= v for x in scores) >= q / 100 * len(scores) - 1e-9


def test_summary_seed_permutation_invariance():
    rng = np.random.default_rng(0)
    per = [{"seed": i, "oracle_scores": rng.normal(size=16).tolist(),
            "proxy_scores": rng.normal(size=16).tolist()} for i in range(6)]
    a = H.summarize(per, -3.0, 2.0)
    b = H.summarize(per[::-1], -3.0, 2.0)
    for k in ("p100_mean", "p100_std", "p50_mean", "p50_std", "gap_mean",
              "normalized_p100_mean"):
        assert abs(a[k] - b[k]) < 1e-12
    assert a["p100_per_seed"] == b["p100_per_seed"][::-1]
    assert a["normalized_p100_mean"] == pytest.approx(
        np.mean(normalize_score(np.array(a["p100_per_seed"]), -3.0, 2.0)))


def test_config_validation():
    with pytest.raises(UsageError):
        tiny(method="nope")
    with pytest.raises(UsageError):
        tiny(method="grad-ascent", ablation="adapt-first-term-only")
    with pytest.raises(UsageError):
        tiny(ablation="both")
    with pytest.raises(UsageError):
        tiny(seeds=())
    with pytest.raises(UsageError):
        tiny(task="missing")


def test_method_configs():
    cfg = tiny()
    p, s = H.method_configs(replace(cfg, method="grad-ascent"), 3, 0.005)
    assert p.epsilon == 0 and p.input_noise_std == 0 and not s.adapt and s.trust_N == math.inf
    p, s = H.method_configs(replace(cfg, method="roma-plain-pretrain"), 3, 0.005)
    assert p.epsilon == 0 and p.input_noise_std == TINY_P.input_noise_std and s.adapt
    p, s = H.method_configs(replace(cfg, method="roma-no-adapt"), 3, 0.005)
    assert p.epsilon == 0.005 and not s.adapt
    _, s = H.method_configs(replace(cfg, ablation="adapt-first-term-only"), 3, 0.005)
    assert s.alpha == 0 and s.grad_weight == 1
    _, s = H.method_configs(replace(cfg, ablation="adapt-second-term-only"), 3, 0.005)
    assert s.grad_weight == 0 and s.alpha == TINY_S.alpha


# -- runs ----------------------------------------------------------------------------

def test_run_record_recomputes():
    rec = H.run_experiment(tiny())
    assert len(rec.per_seed) == 2
    assert all(len(r["oracle_scores"]) == 8 for r in rec.per_seed)
    again = H.recompute_summary(H.RunRecord.from_dict(json.loads(json.dumps(rec.to_dict()))))
    for k, v in rec.summary.items():
        if isinstance(v, float):
            assert abs(again[k] - v) <= 1e-10
    assert rec.config["solve"]["adapt_step_size"] == pytest.approx(TINY_S.epsilon / 3)


def test_reduction_identity_bitwise():
    base = tiny(method="grad-ascent")
    ga = H.run_experiment(base)
    H.clear_caches()
    reduced = replace(base, method="roma-no-adapt",
                      pretrain=replace(TINY_P, epsilon=0.0, input_noise_std=0.0),
                      solve=replace(TINY_S, trust_N=math.inf))
    roma = H.run_experiment(reduced)
    for a, b in zip(ga.per_seed, roma.per_seed):
        assert a["final_inputs"] == b["final_inputs"]
        assert a["oracle_scores"] == b["oracle_scores"]


def test_zero_eta_keeps_initial_scores():
    rec = H.run_experiment(tiny(method="grad-ascent", solve=replace(TINY_S, eta0=0.0)))
    for r in rec.per_seed:
        assert r["oracle_scores"] == r["initial_scores"]


def test_oracle_sealed_during_search():
    attempts = []
    ds, oracle = H.load_task("quadratic-bowl", 0)

    def probe(ctx, diag):
        try:
            oracle(np.zeros(4))
            attempts.append("leaked")
        except OracleSealedError:
            attempts.append("sealed")

    H.SOLVER_MONITOR = probe
    try:
        H.run_experiment(tiny(seeds=(0,)))
    finally:
        H.SOLVER_MONITOR = None
    assert attempts and set(attempts) == {"sealed"}
    assert oracle.sealed and oracle.calls == 8


def test_epsilon_search_descends(monkeypatch):
    real = H.pretrain

    def picky(ds, config, monitor=None):
        if config.epsilon > 0.01:
            raise UnstableTrainingError(config.epsilon, 3)
        return real(ds, config, monitor)

    monkeypatch.setattr(H, "pretrain", picky)
    rec = H.run_experiment(tiny(seeds=(0,), epsilon_search=True))
    r = rec.per_seed[0]
    assert r["epsilon"] == 0.01
    assert [f["epsilon"] for f in r["epsilon_failures"]] == [0.05, 0.02]
    with pytest.raises(UnstableTrainingError):
        H.clear_caches()
        H.run_experiment(tiny(seeds=(0,), pretrain=replace(TINY_P, epsilon=0.05)))


def test_ensemble_method():
    rec = H.run_experiment(tiny(method="grad-ascent-ensemble", seeds=(0,), ensemble_size=3))
    assert len(rec.per_seed[0]["oracle_scores"]) == 8
    assert len([k for k in H._NET_CACHE if k[3][0] == "member"]) == 3


def test_discrete_task_runs():
    cfg = tiny(task="motif-seq", seeds=(0,),
               vae=VaeConfig(hidden_dim=10, latent_dim=4, epochs=2, kl_weight=0.5))
    rec = H.run_experiment(cfg)
    r = rec.per_seed[0]
    X = np.array(r["final_inputs"])
    assert X.shape == (8, 32)
    blocks = X.reshape(8, 8, 4)
    assert np.all(blocks.sum(axis=2) == 1) and set(np.unique(X)) <= {0.0, 1.0}
    assert np.array(r["final_latents"]).shape == (8, 4)
    assert rec.config["vae"]["kl_weight"] == 0.5


def test_workers_match_serial():
    a = H.run_experiment(tiny())
    H.clear_caches()
    b = H.run_experiment(replace(tiny(), workers=2))
    assert [r["oracle_scores"] for r in a.per_seed] == [r["oracle_scores"] for r in b.per_seed]


# -- sweeps and reports ------------------------------------------------------------------

def test_sweep_single_cell_equals_run():
    cfg = tiny(seeds=(0,))
    single = H.run_experiment(cfg)
    H.clear_caches()
    (cell,) = H.sweep(cfg, [("only", {})])
    assert cell.per_seed[0]["oracle_scores"] == single.per_seed[0]["oracle_scores"]
    assert cell.config["sweep_label"] == "only"


def test_sweep_failing_cell_isolated(tmp_path):
    cfg = tiny(seeds=(0,))
    recs = H.sweep(cfg, [{"steps": -1}, {"alpha": 0.5}])
    assert recs[0].error and not recs[1].error
    with pytest.raises(UsageError):
        H.sweep(cfg, [])
    with pytest.raises(UsageError):
        H.apply_overrides(cfg, {"colour": 1})
    H.write_sweep_table(recs, tmp_path / "t.csv")
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[1][1] == "failed" and "+-" in rows[2][1]


def test_alpha_eps_grid_layout(tmp_path):
    grid = H.alpha_eps_grid(1.0, 0.005)
    assert [g[0] for g in grid] == ["(a0, e0)", "(0.1a0, e0)", "(a0, 0.2e0)", "(0.1a0, 0.2e0)"]
    assert grid[3][1] == {"alpha": pytest.approx(0.1), "epsilon": pytest.approx(0.001)}


def test_report_consistency(tmp_path):
    recs = [H.run_experiment(tiny()), H.run_experiment(tiny(task="rough-ridge"))]
    paths = H.report(recs, tmp_path)
    rows = list(csv.DictReader(open(paths["summary"])))
    assert [r["task"] for r in rows] == ["quadratic-bowl", "rough-ridge", "mean"]
    for row, rec in zip(rows, recs):
        assert float(row["p100_mean"]) == rec.summary["p100_mean"]
        assert float(row["p50_std"]) == rec.summary["p50_std"]
        assert float(row["normalized_mean"]) == rec.summary["normalized_p100_mean"]
    # the mean row equals the mean of independently normalised p100s
    indep = [np.mean([(max(r["oracle_scores"]) - rec.dataset["y_min"])
                      / (rec.dataset["y_max"] - rec.dataset["y_min"]) for r in rec.per_seed])
             for rec in recs]
    assert float(rows[2]["normalized_mean"]) == pytest.approx(np.mean(indep), abs=1e-12)
    # percentile curve at q = 100 equals p100
    curve = list(csv.DictReader(open(paths["curves"][("quadratic-bowl", "roma")])))
    assert float(curve[-1]["mean"]) == pytest.approx(recs[0].summary["p100_mean"], abs=1e-12)
    assert float(curve[-1]["dataset_max"]) == recs[0].dataset["y_max"]
    # archive round trip reproduces every number
    back = H.load_records(paths["records"])
    for a, b in zip(back, recs):
        assert H.recompute_summary(a) == b.summary


def test_report_errors(tmp_path):
    with pytest.raises(UsageError):
        H.report([], tmp_path)
    rec = H.run_experiment(tiny(seeds=(0,)))
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        H.report([rec], blocker / "sub")

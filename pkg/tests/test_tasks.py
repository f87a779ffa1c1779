import itertools
import pickle
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from roma import tasks as T
from roma.tasks import (LabeledDataset, OracleSealedError, SequenceSpec, UsageError, get_task,
                        make_task, normalize_score, truncate_top_percentile)


def _ds(scores, seed=0):
    scores = np.asarray(scores, float)
    return LabeledDataset.build(np.arange(scores.size, dtype=float)[:, None], scores, seed=seed)


def test_truncate_hand_example():
    out = truncate_top_percentile(_ds(np.arange(1, 11)), 20)
    assert sorted(out.scores) == list(range(1, 9))


def test_truncate_identity_and_range():
    ds = _ds([3.0, 1.0, 2.0])
    assert truncate_top_percentile(ds, 0) is ds
    for p in (-1, 100, 150):
        with pytest.raises(UsageError):
            truncate_top_percentile(ds, p)


def test_truncate_ties_drop_highest_index_first():
    # scores: [5, 9, 9, 9, 1]; removing 2 rows among the tied 9s drops indices 3 and 2
    ds = _ds([5, 9, 9, 9, 1, 0, 0, 0, 0, 0])
    out = truncate_top_percentile(ds, 20)
    assert out.inputs[:, 0].tolist() == [0, 1, 4, 5, 6, 7, 8, 9]


def test_truncate_twice_removes_more():
    ds = _ds(np.arange(50))
    once = truncate_top_percentile(ds, 20)
    twice = truncate_top_percentile(once, 20)
    assert len(twice) < len(once) < len(ds)


@given(st.lists(st.integers(-5, 5), min_size=1, max_size=60), st.floats(0, 99.9))
def test_truncate_matches_brute_force(scores, p):
    ds = _ds(scores)
    n = len(scores)
    k = int(np.ceil(p / 100 * n - 1e-9))
    if k >= n:  # nothing would remain
        with pytest.raises(UsageError):
            truncate_top_percentile(ds, p)
        return
    out = truncate_top_percentile(ds, p)
    ranked = sorted(range(n), key=lambda i: (-scores[i], -i))
    keep = sorted(ranked[k:])
    assert out.inputs[:, 0].astype(int).tolist() == keep
    if k > 0 and len(set(scores)) > 1 and out.scores.size:
        assert out.stats.y_max <= ds.stats.y_max


def test_normalize_examples():
    assert normalize_score(7.0, 2.0, 7.0) == 1.0
    assert normalize_score(2.0, 2.0, 7.0) == 0.0
    assert normalize_score(12.0, 2.0, 7.0) == 2.0
    with pytest.raises(UsageError):
        normalize_score(1.0, 3.0, 3.0)


def test_make_task_examples():
    spec = get_task("quadratic-bowl")
    raw, _ = make_task(replace(spec, truncate_top_percent=0), seed=0)
    X = np.random.default_rng(0).uniform(spec.lower, spec.upper, (1000, 4))
    assert raw.stats.y_max == T.quadratic_bowl(X).max()
    ds, _ = make_task(spec, seed=0)
    assert len(ds) == 800
    assert ds.scores.max() <= np.percentile(raw.scores, 80, method="lower") + 1e-12
    ds2, _ = make_task(spec, seed=0)
    assert np.array_equal(ds.inputs, ds2.inputs) and np.array_equal(ds.scores, ds2.scores)
    assert ds.provenance["task"] == "quadratic-bowl" and ds.provenance["truncations"] == [20.0]


def test_make_task_degenerate_region():
    spec = get_task("quadratic-bowl")
    with pytest.raises(UsageError):
        make_task(replace(spec, upper=spec.lower.copy()))


def test_stats_and_split():
    ds, _ = make_task(get_task("rough-ridge"))
    s = T.DatasetStats.of(ds.scores)
    assert abs(s.y_mean - ds.stats.y_mean) < 1e-10 and abs(s.y_std - ds.stats.y_std) < 1e-10
    assert ds.val_idx.size == 80 and ds.train_idx.size == 720
    assert not set(ds.val_idx) & set(ds.train_idx)
    assert T.validation_size(20000) == 500 and T.validation_size(5000) == 200


@pytest.mark.parametrize("name", ["quadratic-bowl", "rough-ridge", "plateau-cliff"])
def test_continuous_optimum_grid_check(name):
    spec = get_task(name)
    f = spec.oracle
    assert f(spec.optimum_x)[0] == pytest.approx(spec.optimum_value, abs=1e-12)
    g = np.linspace(-1.0 if name != "quadratic-bowl" else -2.0, 1.0 if name != "quadratic-bowl"
                    else 2.0, 21)
    grid = np.array(list(itertools.product(g, repeat=4)))
    assert f(grid).max() <= spec.optimum_value + 1e-12
    # local refinement around the documented optimum finds nothing better
    rng = np.random.default_rng(0)
    near = spec.optimum_x + rng.normal(0, 0.02, (20000, 4))
    near = np.clip(near, spec.lower, spec.upper)
    assert f(near).max() <= spec.optimum_value + 1e-9


def test_rough_ridge_is_base_plus_roughness():
    X = np.random.default_rng(0).uniform(-1, 1, (100, 4))
    r = T.RIDGE
    rough = r["amplitude"] * np.sin(r["omega"] * X).sum(axis=1)
    np.testing.assert_allclose(T.rough_ridge(X), T.rough_ridge_base(X) + rough, atol=1e-12)


def test_rough_ridge_separable_optimum_1d():
    u = np.linspace(-1, 1, 2_000_001)
    vals = T._ridge_1d(u, **T.RIDGE)
    assert get_task("rough-ridge").optimum_x[0] == pytest.approx(u[np.argmax(vals)], abs=2e-6)


def test_plateau_piecewise():
    p = T.PLATEAU
    for u, expected in [(-0.5, -0.5), (p["rise_end"], p["rise_end"]), (1.0, p["rise_end"]),
                        (p["cliff_start"] + 0.1, p["rise_end"] - p["cliff_slope"] * 0.1)]:
        assert T.plateau_cliff(np.full(4, u))[0] == pytest.approx(expected)


def _motif_score_str(seq: str) -> float:
    # independent reference: overlapping substring counts on the token string
    return sum(w * sum(seq.startswith("".join(map(str, m)), i) for i in range(len(seq)))
               for m, w in T.MOTIFS.items())


def test_motif_exhaustive_optimum():
    spec = get_task("motif-seq")
    allseq = np.array(list(itertools.product(range(4), repeat=8)))
    scores = T.motif_counts(allseq)
    strs = ["".join(map(str, s)) for s in allseq]
    sample = np.random.default_rng(0).choice(len(strs), 3000, replace=False)
    for i in sample:
        assert scores[i] == pytest.approx(_motif_score_str(strs[i]), abs=1e-12)
    best = max(strs, key=_motif_score_str)
    assert spec.optimum_value == pytest.approx(_motif_score_str(best), abs=1e-12)
    assert spec.optimum_value == pytest.approx(4.2)
    assert spec.oracle(spec.optimum_x)[0] == pytest.approx(4.2)


def test_motif_counts_overlap():
    # 3 3 3 contains "33" twice; "012" then "20" overlap on the 2
    assert T.motif_counts(np.array([3, 3, 3, 1, 1, 1, 1, 1]))[0] == pytest.approx(1.2)
    assert T.motif_counts(np.array([0, 1, 2, 0, 1, 1, 1, 1]))[0] == pytest.approx(1.4)


def test_sequence_spec_validation():
    spec = SequenceSpec(3, 2)
    x = spec.one_hot([0, 1, 1])
    assert x.tolist() == [1, 0, 0, 1, 0, 1]
    assert spec.is_valid(x).all()
    assert not spec.is_valid(np.array([1, 1, 0, 1, 0, 1.0])).any()
    assert not spec.is_valid(np.array([0.5, 0.5, 0, 1, 0, 1.0])).any()
    with pytest.raises(UsageError):
        spec.tokens(np.zeros(6))
    with pytest.raises(UsageError):
        spec.one_hot([0, 2, 1])


def test_oracle_sealed_and_unpicklable():
    _, oracle = make_task(get_task("quadratic-bowl"))
    with pytest.raises(OracleSealedError):
        oracle(np.zeros(4))
    oracle.release()
    a = oracle(np.zeros((3, 4)))
    assert np.array_equal(a, oracle(np.zeros((3, 4))))  # purity
    assert oracle.calls == 6
    with pytest.raises(TypeError):
        pickle.dumps(oracle)


def test_dataset_file_roundtrip(tmp_path):
    for name in ("rough-ridge", "motif-seq"):
        ds, _ = make_task(get_task(name))
        path = tmp_path / f"{name}.dat"
        ds.save(path)
        back = LabeledDataset.load(path)
        assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.scores, ds.scores)
        assert np.array_equal(back.train_idx, ds.train_idx)
        assert np.array_equal(back.val_idx, ds.val_idx)
        assert back.stats == ds.stats and back.sequence == ds.sequence
        assert back.provenance == ds.provenance
    (tmp_path / "junk").write_bytes(b"nonsense")
    with pytest.raises(UsageError):
        LabeledDataset.load(tmp_path / "junk")


def test_dataset_csv(tmp_path):
    ds = _ds([1.0, 2.0, 3.0])
    ds.to_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "x0,y,split" and len(lines) == 4


def test_unknown_task():
    with pytest.raises(UsageError):
        get_task("nope")

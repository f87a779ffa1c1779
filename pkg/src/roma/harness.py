"""Experiment orchestration: methods, seeds, metrics, sweeps and reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .pretrain import PretrainConfig, UnstableTrainingError, pretrain
from .proxy import forward
from .solver import (SolveConfig, candidate_finals, ensemble_ascent,
                     optimize_candidates, select_initial_candidates)
from .tasks import LabeledDataset, UsageError, get_task, make_task, normalize_score
from .vae import VaeConfig, VaeModel, decode_argmax, encode, train_vae

log = logging.getLogger(__name__)

METHODS = ("roma", "roma-no-adapt", "roma-plain-pretrain", "grad-ascent",
           "grad-ascent-ensemble")
ABLATIONS = ("adapt-first-term-only", "adapt-second-term-only")
EPSILON_GRID = (0.05, 0.02, 0.01, 0.005, 0.002, 0.001, 0.0005)
ENSEMBLE_SIZE = 5
DEFAULT_SEEDS = tuple(range(16))

# Optional ``callback(context, diagnostics)`` invoked every solver round of
# every run; ``context`` holds task, method and seed.  Instrumentation only.
SOLVER_MONITOR = None


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    method: str = "roma"
    seeds: tuple = DEFAULT_SEEDS
    pretrain: PretrainConfig = PretrainConfig()
    solve: SolveConfig = SolveConfig()
    ablation: str | None = None
    output_dir: str | None = None
    epsilon_search: bool = False
    data_seed: int = 0
    percentile_rule: str = "nearest-rank"
    ensemble_size: int = ENSEMBLE_SIZE
    vae: VaeConfig | None = None
    workers: int = 1

    def __post_init__(self):
        get_task(self.task)
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.ablation is not None:
            if self.ablation not in ABLATIONS:
                raise UsageError(f"unknown ablation {self.ablation!r}")
            if self.method != "roma":
                raise UsageError("ablations apply only to method 'roma'")
        if len(self.seeds) == 0:
            raise UsageError("at least one seed is required")
        if self.percentile_rule not in ("nearest-rank", "linear"):
            raise UsageError("percentile_rule must be 'nearest-rank' or 'linear'")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def resolved(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("pretrain", "solve", "vae")}
        d["pretrain"] = self.pretrain.resolved()
        d["solve"] = self.solve.resolved()
        d["vae"] = self.vae_config(0).resolved() if self.is_discrete else None
        d["seeds"] = list(self.seeds)
        return d

    @property
    def is_discrete(self) -> bool:
        return get_task(self.task).kind == "discrete"

    def vae_config(self, seed: int) -> VaeConfig:
        base = self.vae
        if base is None:
            kl = get_task(self.task).params.get("vae_kl_weight", 1.0)
            base = VaeConfig(kl_weight=kl)
        return replace(base, seed=seed)


@dataclass
class RunRecord:
    config: dict
    per_seed: list
    summary: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    wall_time: float = 0.0
    version: str = __version__
    backend: str = kernels.BACKEND
    error: str | None = None

    @property
    def task(self) -> str:
        return self.config["task"]

    @property
    def method(self) -> str:
        return self.config["method"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


# -- metrics -----------------------------------------------------------------------

def percentile_score(oracle_scores, q: float, rule: str = "nearest-rank") -> float:
    """Score at percentile ``q`` of the candidates.

    ``nearest-rank`` takes the ascending-sorted value at index
    ``ceil(q / 100 * n) - 1``; ``q = 100`` is the maximum.
    """
    s = np.sort(np.asarray(oracle_scores, dtype=np.float64).reshape(-1))
    if s.size == 0:
        raise UsageError("percentile of an empty score list")
    if not 0 <= q <= 100:
        raise UsageError("q must lie in [0, 100]")
    if rule == "linear":
        return float(np.percentile(s, q))
    if rule != "nearest-rank":
        raise UsageError(f"unknown percentile rule {rule!r}")
    idx = max(math.ceil(q / 100.0 * s.size - 1e-12) - 1, 0)
    return float(s[idx])


def summarize(per_seed: list, y_min: float, y_max: float, rule: str = "nearest-rank") -> dict:
    """Aggregate statistics recomputed from per-candidate oracle and proxy scores."""
    p100 = np.array([percentile_score(r["oracle_scores"], 100, rule) for r in per_seed])
    p50 = np.array([percentile_score(r["oracle_scores"], 50, rule) for r in per_seed])
    gap = np.array([np.mean(np.subtract(r["proxy_scores"], r["oracle_scores"]))
                    for r in per_seed])
    n100 = normalize_score(p100, y_min, y_max)
    n50 = normalize_score(p50, y_min, y_max)
    out = {}
    for name, v in (("p100", p100), ("p50", p50), ("gap", gap),
                    ("normalized_p100", n100), ("normalized_p50", n50)):
        out[name + "_mean"] = float(np.mean(v))
        out[name + "_std"] = float(np.std(v))
    out["p100_per_seed"] = p100.tolist()
    out["p50_per_seed"] = p50.tolist()
    out["gap_per_seed"] = gap.tolist()
    return out


def recompute_summary(record: RunRecord) -> dict:
    return summarize(record.per_seed, record.dataset["y_min"], record.dataset["y_max"],
                     record.config.get("percentile_rule", "nearest-rank"))


# -- per-seed pipeline ------------------------------------------------------------

_TASK_CACHE: dict = {}
_NET_CACHE: dict = {}
_VAE_CACHE: dict = {}


def clear_caches() -> None:
    _TASK_CACHE.clear()
    _NET_CACHE.clear()
    _VAE_CACHE.clear()


def load_task(name: str, data_seed: int):
    key = (name, data_seed)
    if key not in _TASK_CACHE:
        _TASK_CACHE[key] = make_task(get_task(name), data_seed)
    ds, oracle = _TASK_CACHE[key]
    oracle.seal()
    return ds, oracle


def get_vae(cfg: ExperimentConfig, ds: LabeledDataset, seed: int) -> VaeModel:
    vcfg = cfg.vae_config(seed)
    key = (cfg.task, cfg.data_seed, vcfg)
    if key not in _VAE_CACHE:
        _VAE_CACHE[key] = train_vae(ds.inputs, ds.sequence, vcfg)[0]
    return _VAE_CACHE[key]


def working_dataset(cfg: ExperimentConfig, ds: LabeledDataset, seed: int):
    """The dataset the proxy sees: raw inputs, or VAE latents for sequences."""
    if ds.sequence is None:
        return ds, None
    vae = get_vae(cfg, ds, seed)
    Z = encode(vae, ds.inputs)
    prov = dict(ds.provenance, latent=True, vae_seed=seed)
    return LabeledDataset.build(Z, ds.scores, seed=ds.provenance.get("seed", 0),
                                provenance=prov), vae


def get_proxy(cfg: ExperimentConfig, work: LabeledDataset, pcfg: PretrainConfig, tag: tuple):
    vkey = cfg.vae_config(work.provenance["vae_seed"]) if work.provenance.get("latent") else None
    key = (cfg.task, cfg.data_seed, vkey, tag, pcfg)
    if key not in _NET_CACHE:
        _NET_CACHE[key] = pretrain(work, pcfg)
    return _NET_CACHE[key]


def method_configs(cfg: ExperimentConfig, seed: int, epsilon: float):
    """Pretraining and solver settings implied by the method and ablation."""
    p = replace(cfg.pretrain, seed=seed, epsilon=epsilon)
    s = replace(cfg.solve, seed=seed, epsilon=epsilon, adapt=True)
    m = cfg.method
    if m == "roma-no-adapt":
        s = replace(s, adapt=False)
    elif m == "roma-plain-pretrain":
        p = replace(p, epsilon=0.0)
    elif m in ("grad-ascent", "grad-ascent-ensemble"):
        p = replace(p, epsilon=0.0, input_noise_std=0.0)
        s = replace(s, adapt=False, trust_N=math.inf)
    if cfg.ablation == "adapt-first-term-only":
        s = replace(s, alpha=0.0)
    elif cfg.ablation == "adapt-second-term-only":
        s = replace(s, grad_weight=0.0)
    return p, s


def _train_with_search(cfg, work, seed):
    """Pretrain, descending the epsilon grid on instability when searching."""
    failures = []
    baseline = cfg.method in ("grad-ascent", "grad-ascent-ensemble")
    grid = list(EPSILON_GRID) if cfg.epsilon_search and not baseline else [cfg.pretrain.epsilon]
    for eps in grid:
        pcfg, scfg = method_configs(cfg, seed, eps)
        try:
            net, tlog = get_proxy(cfg, work, pcfg, ("single",))
            return net, tlog, pcfg, scfg, failures
        except UnstableTrainingError as exc:
            failures.append({"epsilon": eps, "error": str(exc)})
            if not cfg.epsilon_search:
                raise
    raise UnstableTrainingError(grid[-1], -1)


def run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    """Full pipeline for one seed; returns the JSON-ready per-seed record."""
    t0 = time.perf_counter()
    ds, oracle = load_task(cfg.task, cfg.data_seed)
    work, vae = working_dataset(cfg, ds, seed)
    C = cfg.solve.candidate_count
    X0_raw = select_initial_candidates(work, C)
    X0 = work.standardize_x(X0_raw)
    init_scores = ds.scores[np.lexsort((np.arange(len(ds)), -ds.scores))[:C]]
    if cfg.method == "grad-ascent-ensemble":
        pcfg, scfg = method_configs(cfg, seed, cfg.pretrain.epsilon)
        members = []
        for j in range(cfg.ensemble_size):
            mcfg = replace(pcfg, seed=10_000 + 100 * seed + j)
            members.append(get_proxy(cfg, work, mcfg, ("member", j))[0])
        states = ensemble_ascent(members, X0, scfg)
        nets, tlog, failures = members, None, []
    else:
        net, tlog, pcfg, scfg, failures = _train_with_search(cfg, work, seed)
        monitor = None
        if SOLVER_MONITOR is not None:
            ctx = {"task": cfg.task, "method": cfg.method, "seed": seed,
                   "ablation": cfg.ablation}
            monitor = lambda diag: SOLVER_MONITOR(ctx, diag)  # noqa: E731
        states = optimize_candidates(net, X0, scfg, monitor=monitor)
        nets = [net]
    Z = candidate_finals(states)
    proxy_std = np.mean([forward(n, Z) for n in nets], axis=0)
    proxy_raw = work.destandardize_y(proxy_std)
    # map the displacement back, so unmoved candidates reproduce their raw inputs exactly
    finals = X0_raw + (Z - X0) * work.x_std
    if vae is not None:
        latents, finals = finals, decode_argmax(vae, finals)
    # final candidates are fixed from here on
    oracle.release()
    try:
        scores = oracle(finals)
    finally:
        oracle.seal()
    rec = {
        "seed": seed,
        "epsilon": pcfg.epsilon,
        "epsilon_failures": failures,
        "final_inputs": finals.tolist(),
        "proxy_scores": proxy_raw.tolist(),
        "oracle_scores": scores.tolist(),
        "initial_scores": init_scores.tolist(),
        "frozen": int(sum(s.frozen for s in states)),
        "best_epoch": None if tlog is None else tlog.best_epoch,
        "best_val_loss": (None if tlog is None or tlog.best_epoch < 0
                          else tlog.records[tlog.best_epoch].val_loss),
        "seconds": time.perf_counter() - t0,
    }
    if vae is not None:
        rec["final_latents"] = latents.tolist()
    return rec


def run_experiment(config: ExperimentConfig) -> RunRecord:
    """Run every seed of ``config`` and aggregate."""
    t0 = time.perf_counter()
    ds, _ = load_task(config.task, config.data_seed)
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            per_seed = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        per_seed = [run_seed(config, s) for s in config.seeds]
    per_seed.sort(key=lambda r: config.seeds.index(r["seed"]))
    st = ds.stats
    record = RunRecord(
        config=config.resolved(), per_seed=per_seed,
        dataset={"y_min": st.y_min, "y_max": st.y_max, "y_mean": st.y_mean,
                 "y_std": st.y_std, "rows": len(ds), "provenance": ds.provenance},
    )
    record.summary = recompute_summary(record)
    record.wall_time = time.perf_counter() - t0
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / f"{config.task}__{run_label(record)}.json", record.to_dict())
    return record


def run_label(record: RunRecord) -> str:
    ab = record.config.get("ablation")
    return record.method + (f"+{ab}" if ab else "")


# -- sweeps ------------------------------------------------------------------------

SWEEP_KEYS = {"alpha": ("solve", "alpha"), "epsilon": ("pretrain", "epsilon"),
              "steps": ("solve", "steps"), "sigma_in": ("pretrain", "input_noise_std"),
              "eta0": ("solve", "eta0"), "trust_n": ("solve", "trust_N")}


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    p, s = config.pretrain, config.solve
    for k, v in overrides.items():
        try:
            part, attr = SWEEP_KEYS[k]
        except KeyError:
            raise UsageError(f"cannot sweep over {k!r}; use one of {sorted(SWEEP_KEYS)}") from None
        if part == "solve":
            s = replace(s, **{attr: v})
        else:
            p = replace(p, **{attr: v})
    return replace(config, pretrain=p, solve=s)


def alpha_eps_grid(alpha0: float, eps0: float) -> list[tuple[str, dict]]:
    return [
        ("(a0, e0)", {"alpha": alpha0, "epsilon": eps0}),
        ("(0.1a0, e0)", {"alpha": 0.1 * alpha0, "epsilon": eps0}),
        ("(a0, 0.2e0)", {"alpha": alpha0, "epsilon": 0.2 * eps0}),
        ("(0.1a0, 0.2e0)", {"alpha": 0.1 * alpha0, "epsilon": 0.2 * eps0}),
    ]


def sweep(config: ExperimentConfig, grid: list) -> list[RunRecord]:
    """One run per grid cell; a failing cell is recorded, not raised.

    ``grid`` holds ``(label, overrides)`` pairs or bare override dicts.
    """
    if not grid:
        raise UsageError("sweep grid is empty")
    out = []
    for i, cell in enumerate(grid):
        label, overrides = cell if isinstance(cell, tuple) else (f"cell{i}", cell)
        try:
            rec = run_experiment(apply_overrides(config, overrides))
        except (UnstableTrainingError, UsageError, FloatingPointError) as exc:
            rec = RunRecord(config=dict(config.resolved()), per_seed=[], error=str(exc))
        rec.config["sweep_label"] = label
        rec.config["sweep_overrides"] = overrides
        out.append(rec)
    return out


def write_sweep_table(records: list[RunRecord], path) -> None:
    """Rows are grid cells, columns are tasks, cells read ``p100 mean +- std``."""
    tasks = list(dict.fromkeys(r.task for r in records))
    labels = list(dict.fromkeys(r.config.get("sweep_label", "") for r in records))
    cell = {(r.config.get("sweep_label", ""), r.task): r for r in records}
    rows = [["hyperparam"] + tasks]
    for lab in labels:
        row = [lab]
        for t in tasks:
            r = cell.get((lab, t))
            if r is None:
                row.append("")
            elif r.error:
                row.append("failed")
            else:
                row.append(f"{r.summary['p100_mean']:.6g} +- {r.summary['p100_std']:.6g}")
        rows.append(row)
    _write_csv(path, rows)


# -- reports -----------------------------------------------------------------------

def _write_csv(path, rows) -> None:
    try:
        with open(Path(path), "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=1, default=_jsonable))
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def percentile_curve(oracle_scores, rule: str = "nearest-rank") -> np.ndarray:
    return np.array([percentile_score(oracle_scores, q, rule) for q in range(1, 101)])


SUMMARY_COLUMNS = ["task", "method", "p100_mean", "p100_std", "p50_mean", "p50_std",
                   "normalized_mean", "gap_mean", "seeds"]


def report(records: list[RunRecord], out_dir) -> dict:
    """Write ``summary.csv``, ``records.json`` and per-run percentile curves.

    Every number is recomputed from the stored per-candidate scores.  Rows
    with ``task = mean`` average each method's normalised p100 over tasks.
    """
    records = [r for r in records if not r.error]
    if not records:
        raise UsageError("report needs at least one successful record")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    rows = [SUMMARY_COLUMNS]
    by_method: dict[str, list[float]] = {}
    curves = {}
    for r in records:
        s = recompute_summary(r)
        label = run_label(r)
        rows.append([r.task, label, s["p100_mean"], s["p100_std"], s["p50_mean"], s["p50_std"],
                     s["normalized_p100_mean"], s["gap_mean"], len(r.per_seed)])
        by_method.setdefault(label, []).append(s["normalized_p100_mean"])
        rule = r.config.get("percentile_rule", "nearest-rank")
        per = np.stack([percentile_curve(p["oracle_scores"], rule) for p in r.per_seed])
        crow = [["percentile"] + [f"seed_{p['seed']}" for p in r.per_seed]
                + ["mean", "dataset_max"]]
        for i, q in enumerate(range(1, 101)):
            crow.append([q] + per[:, i].tolist() + [per[:, i].mean(), r.dataset["y_max"]])
        name = out / "curves" / f"{r.task}__{label}.csv"
        _write_csv(name, crow)
        curves[(r.task, label)] = name
    for label, vals in by_method.items():
        rows.append(["mean", label, "", "", "", "", float(np.mean(vals)), "", ""])
    _write_csv(out / "summary.csv", rows)
    write_json(out / "records.json", [r.to_dict() for r in records])
    return {"summary": out / "summary.csv", "records": out / "records.json", "curves": curves}


def load_records(path) -> list[RunRecord]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [RunRecord.from_dict(d) for d in data]


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))

"""Command-line entry point.

Subcommands: ``make-task``, ``pretrain``, ``solve``, ``run``, ``sweep`` and
``report``.  ``run`` and ``sweep`` also read a JSON config file whose keys
mirror the long flags (``task``, ``method``, ``seeds``, ``alpha``,
``epsilon``, ``steps``, ``eta0``, ``trust_n``, ``sigma_in``,
``adapt_scope``, ``out``, plus ``epochs``, ``adapt_steps``, ``candidates``,
``ablation``, ``epsilon_search``, ``data_seed``, ``percentile_rule``,
``workers``).  Flags given on the command line override the file.

Exit codes: 0 success, 2 invalid input, 3 unstable pretraining, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import (ExperimentConfig, load_records, report, run_experiment, sweep,
                      alpha_eps_grid, write_json, write_sweep_table)
from .pretrain import PretrainConfig, UnstableTrainingError, pretrain
from .proxy import read_checkpoint, save_checkpoint
from .solver import (SolveConfig, candidate_finals, optimize_candidates,
                     select_initial_candidates, write_candidate_table)
from .tasks import LabeledDataset, UsageError, get_task, make_task
from .vae import VaeConfig, VaeModel, decode_argmax, encode, train_vae

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNSTABLE = 3
EXIT_IO = 4

CONFIG_KEYS = {"task", "method", "seeds", "alpha", "epsilon", "steps", "eta0", "trust_n",
               "sigma_in", "adapt_scope", "out", "epochs", "adapt_steps", "candidates",
               "ablation", "epsilon_search", "data_seed", "percentile_rule", "workers"}


def parse_seeds(text) -> tuple:
    """Parse ``"0-15"``, ``"0,3,7"`` or a list of ints."""
    if isinstance(text, (list, tuple)):
        return tuple(int(s) for s in text)
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    if not out:
        raise UsageError(f"no seeds in {text!r}")
    return tuple(out)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--task", default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--seeds", default=None, help="e.g. 0-15 or 0,1,2")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--eta0", type=float, default=None)
    p.add_argument("--trust-n", dest="trust_n", type=float, default=None)
    p.add_argument("--sigma-in", dest="sigma_in", type=float, default=None)
    p.add_argument("--adapt-scope", dest="adapt_scope", default=None,
                   choices=["per-candidate", "shared-batch"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--adapt-steps", dest="adapt_steps", type=int, default=None)
    p.add_argument("--candidates", type=int, default=None)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="roma", description="Robust offline model-based optimisation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-task", help="sample and save a task dataset")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("pretrain", help="train a proxy and save a checkpoint")
    _common(p)
    p.add_argument("--dataset", default=None, help="dataset file from make-task")
    p.add_argument("--log", default=None, help="training-log CSV path")

    p = sub.add_parser("solve", help="optimise candidates with a saved proxy")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--no-adapt", action="store_true")

    for name in ("run", "sweep"):
        p = sub.add_parser(name, help=f"{name} an experiment")
        _common(p)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--ablation", default=None,
                       choices=["adapt-first-term-only", "adapt-second-term-only"])
        p.add_argument("--epsilon-search", dest="epsilon_search", action="store_true",
                       default=None)
        p.add_argument("--data-seed", dest="data_seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if name == "sweep":
            p.add_argument("--grid", default="alpha-eps",
                           help="'alpha-eps', 'steps' or a JSON list of override dicts")

    p = sub.add_parser("report", help="summarise archived records")
    p.add_argument("records", nargs="+")
    p.add_argument("--out", required=True)
    return ap


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise OSError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(data) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def merged_options(args) -> dict:
    opts = {}
    if getattr(args, "config", None):
        opts.update(load_config_file(args.config))
    for k in CONFIG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    if "task" not in opts:
        raise UsageError("--task is required (flag or config file)")
    return opts


def experiment_from_options(opts: dict) -> ExperimentConfig:
    spec = get_task(opts["task"])
    p = PretrainConfig(epsilon=opts.get("epsilon", spec.epsilon))
    if "sigma_in" in opts:
        p = replace(p, input_noise_std=opts["sigma_in"])
    if "epochs" in opts:
        p = replace(p, epochs=opts["epochs"])
    s = SolveConfig(eta0=opts.get("eta0", spec.eta0), epsilon=p.epsilon)
    for key, attr in (("alpha", "alpha"), ("steps", "steps"), ("trust_n", "trust_N"),
                      ("adapt_scope", "adapt_scope"), ("adapt_steps", "adapt_steps"),
                      ("candidates", "candidate_count")):
        if key in opts:
            s = replace(s, **{attr: opts[key]})
    kw = {}
    if "seeds" in opts:
        kw["seeds"] = parse_seeds(opts["seeds"])
    for key in ("ablation", "epsilon_search", "data_seed", "percentile_rule", "workers"):
        if key in opts:
            kw[key] = opts[key]
    return ExperimentConfig(task=opts["task"], method=opts.get("method", "roma"),
                            pretrain=p, solve=s, output_dir=opts.get("out"), **kw)


def _dataset_for(args, task: str | None, data_seed: int = 0) -> LabeledDataset:
    if getattr(args, "dataset", None):
        return LabeledDataset.load(args.dataset)
    if task is None:
        raise UsageError("need --task or --dataset")
    return make_task(get_task(task), data_seed)[0]


def cmd_make_task(args) -> int:
    ds, _ = make_task(get_task(args.task), args.seed)
    ds.save(args.out)
    if args.csv:
        ds.to_csv(args.csv)
    print(f"wrote {len(ds)} rows to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    ds = _dataset_for(args, args.task)
    task = args.task or ds.provenance.get("task")
    spec = get_task(task)
    seed = parse_seeds(args.seeds)[0] if args.seeds else 0
    cfg = PretrainConfig(epsilon=spec.epsilon if args.epsilon is None else args.epsilon, seed=seed)
    if args.sigma_in is not None:
        cfg = replace(cfg, input_noise_std=args.sigma_in)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if not args.out:
        raise UsageError("--out is required")
    work, vae = ds, None
    if ds.sequence is not None:
        kl = spec.params.get("vae_kl_weight", 1.0)
        vae = train_vae(ds.inputs, ds.sequence, VaeConfig(kl_weight=kl, seed=seed))[0]
        work = LabeledDataset.build(encode(vae, ds.inputs), ds.scores,
                                    seed=ds.provenance.get("seed", 0),
                                    provenance=dict(ds.provenance, latent=True))
        vae.save(args.out + ".vae")
    net, tlog = pretrain(work, cfg)
    meta = {"task": task, "pretrain": cfg.resolved(), "data_seed": ds.provenance.get("seed", 0),
            "x_mean": work.x_mean.tolist(), "x_std": work.x_std.tolist(),
            "y_mean": work.stats.y_mean, "y_std": work.stats.y_std,
            "vae": None if vae is None else args.out + ".vae"}
    save_checkpoint(args.out, [("proxy", net)], meta)
    if args.log:
        tlog.to_csv(args.log)
    print(f"best epoch {tlog.best_epoch}, checkpoint {args.out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    header, nets = read_checkpoint(args.checkpoint)
    meta = header["meta"]
    net = nets["proxy"]
    task = args.task or meta.get("task")
    spec = get_task(task)
    ds = _dataset_for(args, task, meta.get("data_seed", 0))
    vae = VaeModel.load(meta["vae"]) if meta.get("vae") else None
    inputs = encode(vae, ds.inputs) if vae is not None else ds.inputs
    work = LabeledDataset.build(inputs, ds.scores, seed=0)
    x_mean, x_std = np.array(meta["x_mean"]), np.array(meta["x_std"])
    eps = meta["pretrain"]["epsilon"] if args.epsilon is None else args.epsilon
    cfg = SolveConfig(eta0=spec.eta0 if args.eta0 is None else args.eta0, epsilon=eps,
                      adapt=not args.no_adapt, record_trajectory=True)
    for key, attr in (("alpha", "alpha"), ("steps", "steps"), ("trust_n", "trust_N"),
                      ("adapt_scope", "adapt_scope"), ("adapt_steps", "adapt_steps"),
                      ("candidates", "candidate_count")):
        v = getattr(args, key)
        if v is not None:
            cfg = replace(cfg, **{attr: v})
    X0 = (select_initial_candidates(work, cfg.candidate_count) - x_mean) / x_std
    states = optimize_candidates(net, X0, cfg)
    finals = candidate_finals(states) * x_std + x_mean
    if vae is not None:
        finals = decode_argmax(vae, finals)
    out = Path(args.out or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    write_candidate_table(states, out / "candidates.csv")
    np.savetxt(out / "solutions.csv", finals, delimiter=",", fmt="%.17g")
    write_json(out / "solve_config.json", cfg.resolved())
    print(f"wrote {len(states)} solutions to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = experiment_from_options(merged_options(args))
    rec = run_experiment(cfg)
    out = cfg.output_dir or "."
    report([rec], out)
    s = rec.summary
    print(f"{cfg.task} {cfg.method}: p100 {s['p100_mean']:.6g} +- {s['p100_std']:.6g}, "
          f"p50 {s['p50_mean']:.6g} +- {s['p50_std']:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = experiment_from_options(merged_options(args))
    if args.grid == "alpha-eps":
        grid = alpha_eps_grid(cfg.solve.alpha, cfg.pretrain.epsilon)
    elif args.grid == "steps":
        grid = [("T=300", {"steps": 300}), ("T=500", {"steps": 500})]
    else:
        try:
            grid = json.loads(args.grid)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--grid is not valid JSON: {exc}") from exc
    recs = sweep(replace(cfg, output_dir=None), grid)
    out = Path(cfg.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_sweep_table(recs, out / "sweep_table.csv")
    write_json(out / "sweep_records.json", [r.to_dict() for r in recs])
    print(f"wrote {len(recs)} cells to {out / 'sweep_table.csv'}")
    return EXIT_OK if all(not r.error for r in recs) else EXIT_UNSTABLE


def cmd_report(args) -> int:
    recs = []
    for path in args.records:
        recs.extend(load_records(path))
    files = report(recs, args.out)
    print(f"wrote {files['summary']}")
    return EXIT_OK


COMMANDS = {"make-task": cmd_make_task, "pretrain": cmd_pretrain, "solve": cmd_solve,
            "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UnstableTrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

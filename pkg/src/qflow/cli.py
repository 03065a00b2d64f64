"""Command-line entry point: ``qflow gen | train | sweep | analyze | bench``.

Configs are YAML mappings whose keys are :class:`TrainConfig` fields. A
config may also carry a ``sweep`` section with ``grid`` (key -> list) and
``seeds`` used by ``qflow sweep``. Output goes under ``--out`` or, failing
that, ``$QFLOW_OUT`` (default ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from .envs2d import DATASETS, ConfigError, gen_dataset, load_dataset, save_dataset
from .trainers import METHODS, Learner, TrainConfig, TrainingDivergence, run_experiment

EXIT_USAGE = 2
EXIT_FAILURE = 1


class UsageError(Exception):
    pass


def out_root() -> Path:
    return Path(os.environ.get("QFLOW_OUT", "runs"))


# --- config handling ----------------------------------------------------


def read_config(path) -> dict:
    """Parse a YAML config; syntax errors are reported with their line number."""
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark is not None else "unknown position"
        problem = getattr(e, "problem", None) or str(e)
        raise UsageError(f"{path}: parse error at {where}: {problem}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: line 1: top level must be a mapping, got {type(data).__name__}")
    return data


def parse_overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def build_config(base: dict, overrides: dict) -> TrainConfig:
    d = {k: v for k, v in base.items() if k != "sweep"}
    d.update(overrides)
    try:
        return TrainConfig.from_dict(d).resolved()
    except KeyError as e:
        raise UsageError(e.args[0]) from None
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _flag_overrides(args) -> dict:
    out = {}
    for name, key in (("method", "method"), ("lam", "lam"), ("alpha", "alpha"), ("steps", "steps"),
                      ("seed", "seed"), ("dataset", "dataset")):
        val = getattr(args, name, None)
        if val is not None:
            out[key] = val
    return out


def _dataset_for(cfg: TrainConfig):
    return gen_dataset(cfg.dataset, cfg.n_data, cfg.noise, cfg.data_seed)


# --- subcommands --------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n < 1:
        raise UsageError(f"n must be >= 1, got {args.n}")
    try:
        ds = gen_dataset(args.name, args.n, args.noise, args.seed)
    except ConfigError as e:
        raise UsageError(str(e)) from None
    path = Path(args.out) if args.out else out_root() / "data" / f"{args.name}_n{args.n}_s{args.seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path, meta = save_dataset(ds, path)
    print(f"wrote {csv_path} ({len(ds)} rows) and {meta}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(read_config(args.config), {**parse_overrides(args.set), **_flag_overrides(args)})
    sink = Path(args.out) if args.out else out_root() / f"{cfg.method}-{cfg.config_hash()}"
    manifest = run_experiment(cfg, _dataset_for(cfg), sink, evaluate=not args.no_eval)
    print(json.dumps({"out": str(sink), "summary": manifest["summary"]}, indent=2))
    return 0


def _run_cell(cfg_dict: dict, sink: str) -> dict:
    cfg = TrainConfig.from_dict(cfg_dict)
    try:
        manifest = run_experiment(cfg, _dataset_for(cfg.resolved()), sink)
        return {"status": "ok", "summary": manifest["summary"]}
    except (TrainingDivergence, OSError, ValueError, FloatingPointError) as e:
        return {"status": "failed", "error": f"{type(e).__name__}: {e}"}


def sweep_cells(base: dict, grid: dict, seeds) -> list[TrainConfig]:
    """Cartesian product of ``grid`` values and seeds, deduplicated by config hash."""
    if not grid and not seeds:
        raise UsageError("sweep grid is empty")
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise UsageError(f"sweep grid entry {k!r} must be a non-empty list")
    seeds = list(seeds) if seeds else [base.get("seed", 0)]
    cells, seen = [], set()
    for combo in itertools.product(*(grid[k] for k in keys)):
        for seed in seeds:
            cfg = build_config(base, {**dict(zip(keys, combo)), "seed": seed})
            h = cfg.config_hash()
            if h not in seen:
                seen.add(h)
                cells.append(cfg)
    return cells


def cmd_sweep(args) -> int:
    base = read_config(args.config)
    base.update(parse_overrides(args.set))
    spec = base.get("sweep") or {}
    grid = dict(spec.get("grid") or {})
    for item in args.grid or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"grid entry {item!r} is not of the form key=v1,v2,...")
        grid[key] = [yaml.safe_load(v) for v in raw.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else spec.get("seeds")
    cells = sweep_cells(base, grid, seeds)
    root = Path(args.out) if args.out else out_root() / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(c.to_dict(), str(root / f"{c.method}-{c.config_hash()}")) for c in cells]
    if args.workers <= 1:
        results = [_run_cell(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_run_cell, *zip(*jobs)))
    index = {"n_cells": len(cells), "grid": grid, "seeds": seeds, "cells": []}
    for c, (_, sink), res in zip(cells, jobs, results):
        index["cells"].append({"config_hash": c.config_hash(), "dir": Path(sink).name, "seed": c.seed,
                               **{k: getattr(c, k) for k in grid}, **res})
    (root / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    failed = sum(r["status"] != "ok" for r in results)
    print(f"{len(cells) - failed}/{len(cells)} cells succeeded; index at {root / 'index.json'}")
    return EXIT_FAILURE if failed else 0


def _load_run(args):
    run = Path(args.run) if args.run else None
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "final_checkpoint.npz"
    data = Path(args.dataset) if args.dataset else run / "dataset.csv"
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    if not data.exists():
        raise UsageError(f"dataset {data} not found")
    return Learner.load(ckpt), load_dataset(data)


def cmd_analyze(args) -> int:
    from .analysis import consistency_report, landscape_grid, sample_metrics, write_consistency, write_landscape

    if args.run is None and (args.checkpoint is None or args.dataset is None):
        raise UsageError("give --run DIR or both --checkpoint and --dataset")
    learner, ds = _load_run(args)
    sink = Path(args.out) if args.out else (Path(args.run) if args.run else out_root()) / "analysis"
    sink.mkdir(parents=True, exist_ok=True)
    rng = learner.rng(f"eval/analyze/{args.kind}")
    if args.kind in ("consistency", "landscape") and learner.value is None:
        raise UsageError(f"method {learner.cfg.method!r} has no intermediate value network")
    if args.kind == "consistency":
        rep = consistency_report(learner.value, learner.policy, ds, n_states=1, n_trajs=args.n, rng=rng,
                                 mode=args.mode)
        files = write_consistency(rep, sink)
    elif args.kind == "landscape":
        taus = [float(t) for t in args.taus.split(",")]
        files = write_landscape(landscape_grid(learner.value, taus, args.resolution), sink)
    else:
        if args.n < 1:
            raise UsageError("n must be >= 1")
        summary = sample_metrics(learner.sample, ds, ds.reward_spec, args.n, rng, args.eps)
        (sink / "samples_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        files = {"samples_summary": "samples_summary.json"}
    for f in files.values():
        if not (sink / f).exists():
            raise FileNotFoundError(sink / f)
    print(json.dumps({"out": str(sink), "files": sorted(files.values())}, indent=2))
    return 0


def cmd_bench(args) -> int:
    from .analysis import timing_benchmark

    methods = args.methods.split(",")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    flow_steps = [int(k) for k in args.flow_steps.split(",")]
    over = parse_overrides(args.set)
    valid = {f.name for f in dataclasses.fields(TrainConfig)} - {"method", "n_flow_steps", "lam", "alpha"}
    unknown = sorted(set(over) - valid)
    if unknown:
        raise UsageError(f"unknown config keys {unknown}; valid keys: {', '.join(sorted(valid))}")
    if args.steps < 1:
        raise UsageError("steps must be >= 1")
    rows = timing_benchmark(methods, flow_steps, args.steps, warmup=args.warmup, **over)
    path = Path(args.out) if args.out else out_root() / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "flow_steps", "ms_per_step", "steps"])
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['method']:>15} K={r['flow_steps']:<4d} {r['ms_per_step']:9.2f} ms/step")
    return 0


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a 2D dataset (CSV + JSON sidecar)")
    g.add_argument("name", choices=DATASETS)
    g.add_argument("--n", type=int, default=10000)
    g.add_argument("--noise", type=float, default=None, help="default depends on the dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="CSV path")
    g.set_defaults(fn=cmd_gen)

    def run_flags(q, single=True):
        q.add_argument("--config", help="YAML config file")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        q.add_argument("--out", help="output directory")
        if single:
            q.add_argument("--method", choices=METHODS)
            q.add_argument("--lambda", dest="lam", type=float)
            q.add_argument("--alpha", type=float)
            q.add_argument("--steps", type=int, help="RL-phase steps (0 = BC only)")
            q.add_argument("--seed", type=int)
            q.add_argument("--dataset", choices=DATASETS)

    t = sub.add_parser("train", help="one BC + RL run")
    run_flags(t)
    t.add_argument("--no-eval", action="store_true", help="skip sample evaluation and plots")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sweep", help="grid of independent training runs")
    run_flags(s, single=False)
    s.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="sweep axis (repeatable)")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(fn=cmd_sweep)

    a = sub.add_parser("analyze", help="consistency, landscape or sample metrics of a trained run")
    a.add_argument("kind", choices=("consistency", "landscape", "samples"))
    a.add_argument("--run", help="run directory from `qflow train`")
    a.add_argument("--checkpoint")
    a.add_argument("--dataset", help="dataset CSV")
    a.add_argument("--out")
    a.add_argument("--n", type=int, default=None, help="trajectories (consistency) or samples (samples)")
    a.add_argument("--mode", choices=("policy", "dataset"), default="policy")
    a.add_argument("--taus", default="0,0.25,0.5,0.75,1")
    a.add_argument("--resolution", type=int, default=41)
    a.add_argument("--eps", type=float, default=0.3)
    a.set_defaults(fn=cmd_analyze)

    b = sub.add_parser("bench", help="median ms per RL step by method and flow steps")
    b.add_argument("--methods", default="qflow,fbrac")
    b.add_argument("--flow-steps", default="10,25,50")
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--set", action="append", metavar="KEY=VALUE")
    b.add_argument("--out", help="CSV path")
    b.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "analyze" and args.n is None:
        args.n = 4096 if args.kind == "samples" else 32
    try:
        return args.fn(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"qflow {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, OSError, ValueError, FloatingPointError) as e:
        print(f"qflow {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

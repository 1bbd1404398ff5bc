"""Command line entry point: sage genesis|evolve|navigate|eval."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .evolution.objective import EvolutionConfig
from .evolution.policy import NonFiniteGradient, ReferencePolicy, load_checkpoint, save_checkpoint
from .evolution.train import TrainingTrace, config_hash, prepare_task, split_tasks, train
from .experience import ExperienceStore
from .genesis import GenesisConfig, TaskTuple, generate_dataset, load_tasks, save_tasks, scene_from_dict
from .gridworld import GridFormatError, OccupancyGrid
from .mazes import generate_maze
from .metrics import EmptyRecords, metric_rows, metrics_csv, read_metrics_csv, records_from_episodes
from .navigation import (
    EXPERIENCE_MODES,
    FirstFrontierPolicy,
    LinearNavPolicy,
    NavConfig,
    OraclePolicy,
    RandomPolicy,
    episode_from_task,
    run_episode,
    target_cells,
)
from .plotting import plot_metrics, plot_trace

log = logging.getLogger("sage")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_ROOT_ENV = "SAGE_RUN_ROOT"
POLICIES = ("evolved", "random", "oracle", "first-frontier")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ------------------------------------------------------------------- config


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file {p} not found")
    text = p.read_text()
    if p.suffix in (".yaml", ".yml"):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise DataError("config must be a mapping")
    return data


def _section(cfg: dict, name: str, cls) -> dict:
    sec = dict(cfg.get(name, {}))
    known = {f.name for f in fields(cls)}
    bad = set(sec) - known
    if bad:
        raise UsageError(f"unknown {name} config keys: {sorted(bad)}")
    return sec


def _out_dir(args, command: str) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path(os.environ.get(RUN_ROOT_ENV, "runs")) / f"{command}-seed{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise DataError(f"missing {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def parse_eta(text: str) -> float | None:
    if text == "dynamic":
        return None
    if text.startswith("fixed:"):
        try:
            v = float(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad --eta value {text!r}") from None
        if not 0 <= v <= 1:
            raise UsageError("--eta fixed:<v> needs 0 <= v <= 1")
        return v
    raise UsageError("--eta must be 'dynamic' or 'fixed:<v>'")


# ------------------------------------------------------------------ genesis


def cmd_genesis(args, cfg: dict) -> int:
    sec = _section(cfg, "genesis", GenesisConfig)
    for key in ("n_tasks", "density", "multiple_choice"):
        v = getattr(args, key)
        if v is not None:
            sec[key] = v
    sec["seed"] = args.seed
    if "catalog" in sec:
        sec["catalog"] = tuple(sec["catalog"])
    if "wall_labels" in sec:
        sec["wall_labels"] = tuple(sec["wall_labels"])
    gcfg = GenesisConfig(**sec)
    grids = []
    for g in args.grid or []:
        p = Path(g)
        if not p.exists():
            raise DataError(f"grid file {p} not found")
        grids.append(OccupancyGrid.load(p))
    if args.procedural:
        grids += [generate_maze(args.maze_seed + i) for i in range(args.procedural)]
    if not grids:
        raise UsageError("give --grid files or --procedural N")
    ids = [g.grid_id for g in grids]
    if len(set(ids)) != len(ids):
        raise UsageError("grid ids must be unique")
    res = generate_dataset(grids, gcfg)
    out = _out_dir(args, "genesis")
    gdir = out / "grids"
    gdir.mkdir(exist_ok=True)
    for g in grids:
        g.save(gdir / f"{g.grid_id}.txt")
    save_tasks(out / "tasks.jsonl", res.tasks)
    store = ExperienceStore()
    store.extend(res.rules)
    store.save(out / "rules.json")
    with open(out / "trajectories.jsonl", "w") as fh:
        for t in res.trajectories:
            fh.write(t.to_json() + "\n")
    _dump(out / "scenes.json", {k: v.to_dict() for k, v in res.scenes.items()})
    stats = res.statistics()
    _dump(out / "rejection-statistics.json", stats)
    resolved = dict(vars(gcfg))
    resolved["catalog"], resolved["wall_labels"] = list(gcfg.catalog), list(gcfg.wall_labels)
    _dump(out / "config.json", {"command": "genesis", "version": __version__, "genesis": resolved, "grids": ids})
    # read-back validation
    if len(load_tasks(out / "tasks.jsonl")) != len(res.tasks):
        raise DataError("tasks.jsonl failed read-back")
    print(f"genesis: {stats['accepted']} accepted, {stats['rejected']} rejected, {stats['attempted']} attempted -> {out}")
    return EXIT_OK


# ------------------------------------------------------------------- evolve


def _load_dataset(data: Path) -> tuple[list[TaskTuple], ExperienceStore]:
    if not data.is_dir():
        raise DataError(f"dataset directory {data} not found")
    tasks_path = data / "tasks.jsonl"
    if not tasks_path.exists():
        raise DataError(f"missing {tasks_path}")
    try:
        tasks = load_tasks(tasks_path)
        store = ExperienceStore.load(data / "rules.json") if (data / "rules.json").exists() else ExperienceStore()
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed dataset: {exc}") from exc
    return tasks, store


def cmd_evolve(args, cfg: dict) -> int:
    sec = _section(cfg, "evolution", EvolutionConfig)
    if args.eta is not None:
        sec["eta_fixed"] = parse_eta(args.eta)
    for key, name in (("eps_exp", "eps_exp"), ("steps", "training_steps"), ("learning_rate", "learning_rate")):
        v = getattr(args, key)
        if v is not None:
            sec[name] = v
    sec["seed"] = args.seed
    try:
        ecfg = EvolutionConfig(**sec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    tasks, store = _load_dataset(Path(args.data))
    tr, va = split_tasks(tasks, args.train_fraction)
    if not tr and ecfg.training_steps > 0:
        raise DataError("dataset has no training tasks")
    policy = ReferencePolicy(temperature=ecfg.temperature)
    trace = train([prepare_task(t, store, ecfg.retrieval_k) for t in tr], [prepare_task(t, store, ecfg.retrieval_k) for t in va], policy, ecfg)
    out = _out_dir(args, "evolve")
    h = config_hash(ecfg)
    save_checkpoint(out / "checkpoint.json", policy, len(trace.rows), h)
    (out / "trace.csv").write_text(trace.to_csv())
    TrainingTrace.read_csv((out / "trace.csv").read_text())
    plot_trace(trace.rows, out / "trace.svg")
    _dump(
        out / "config.json",
        {
            "command": "evolve",
            "version": __version__,
            "evolution": ecfg.to_dict(),
            "data": str(args.data),
            "train_fraction": args.train_fraction,
            "cfg_hash": h,
            "final_validation": None if np.isnan(trace.final_validation) else trace.final_validation,
        },
    )
    print(f"evolve: {len(trace.rows)} steps, final validation reward {trace.final_validation:.4f} -> {out}")
    return EXIT_OK


# ----------------------------------------------------------------- navigate


def _load_grids_and_scenes(data: Path):
    scenes = {k: scene_from_dict(v) for k, v in _read_json(data / "scenes.json").items()}
    grids = {}
    for gid in scenes:
        p = data / "grids" / f"{gid}.txt"
        if not p.exists():
            raise DataError(f"missing grid {p}")
        grids[gid] = OccupancyGrid.from_text(p.read_text(), grid_id=gid)
    return grids, scenes


def cmd_navigate(args, cfg: dict) -> int:
    sec = _section(cfg, "navigation", NavConfig)
    if args.experience is not None:
        sec["experience"] = args.experience
    if args.t_max is not None:
        sec["t_max"] = args.t_max
    try:
        ncfg = NavConfig(**sec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = Path(args.data)
    tasks, store = _load_dataset(data)
    n = len(tasks) if args.episodes is None else min(args.episodes, len(tasks))
    grids, scenes = _load_grids_and_scenes(data) if n else ({}, {})
    weights = None
    if args.policy == "evolved":
        if not args.checkpoint:
            raise UsageError("--policy evolved needs --checkpoint")
        if not Path(args.checkpoint).exists():
            raise DataError(f"checkpoint {args.checkpoint} not found")
        try:
            weights, _ = load_checkpoint(args.checkpoint)
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"malformed checkpoint: {exc}") from exc
    out = _out_dir(args, "navigate")
    results = []
    with open(out / "episodes.jsonl", "w") as fh:
        for i, task in enumerate(tasks[:n]):
            ep = episode_from_task(task, grids[task.provenance["grid_id"]].resolution, args.kind)
            grid, scene = grids[ep.grid_id], scenes[ep.grid_id]
            if args.policy == "evolved":
                pol = LinearNavPolicy(weights)
            elif args.policy == "random":
                pol = RandomPolicy(args.seed * 100003 + i)
            elif args.policy == "oracle":
                pol = OraclePolicy(grid, target_cells(scene, ep.target_label))
            else:
                pol = FirstFrontierPolicy()
            r = run_episode(ep, grid, scene, pol, store, ncfg, seed=args.seed * 100003 + i)
            results.append(r.to_dict())
            fh.write(r.to_json() + "\n")
    records = records_from_episodes(results)
    (out / "metrics.csv").write_text(metrics_csv(records) if records else ",".join(("category", "n", "SR", "SPL", "SR_llm", "SPL_llm")) + "\n")
    read_metrics_csv((out / "metrics.csv").read_text())
    _dump(
        out / "config.json",
        {
            "command": "navigate",
            "version": __version__,
            "navigation": vars(ncfg),
            "policy": args.policy,
            "kind": args.kind,
            "episodes": n,
            "seed": args.seed,
            "data": str(args.data),
            "checkpoint": args.checkpoint,
        },
    )
    ok = sum(r["success"] for r in results)
    print(f"navigate: {ok}/{n} successful episodes -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------- eval


def cmd_eval(args, cfg: dict) -> int:
    path = Path(args.episodes)
    if not path.exists():
        raise DataError(f"missing {path}")
    try:
        eps = [json.loads(l) for l in path.read_text().splitlines() if l.strip()]
        records = records_from_episodes(eps)
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"malformed episodes file: {exc}") from exc
    out = _out_dir(args, "eval")
    if not records:
        raise DataError("no episodes to evaluate")
    text = metrics_csv(records)
    (out / "metrics.csv").write_text(text)
    plot_metrics(metric_rows(records), out / "metrics.svg")
    sys.stdout.write("---- metrics.csv ----\n" + text + "---- end ----\n")
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sage", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON or YAML file; flags override it")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help=f"run directory (default ${RUN_ROOT_ENV}/<command>-seed<seed>)")
        sp.add_argument("-v", "--verbose", action="store_true")

    g = sub.add_parser("genesis", help="synthesize tasks and experience rules")
    common(g)
    g.add_argument("--grid", action="append", help="grid text file (repeatable)")
    g.add_argument("--procedural", type=int, default=0, metavar="N", help="add N generated mazes")
    g.add_argument("--maze-seed", type=int, default=0)
    g.add_argument("--n-tasks", dest="n_tasks", type=int)
    g.add_argument("--density", type=float)
    g.add_argument("--multiple-choice", dest="multiple_choice", type=float)

    e = sub.add_parser("evolve", help="train the reference policy")
    common(e)
    e.add_argument("--data", required=True, help="genesis run directory")
    e.add_argument("--eta", help="dynamic | fixed:<v>")
    e.add_argument("--eps-exp", dest="eps_exp", type=float)
    e.add_argument("--steps", type=int)
    e.add_argument("--learning-rate", dest="learning_rate", type=float)
    e.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.9)

    n = sub.add_parser("navigate", help="run navigation episodes")
    common(n)
    n.add_argument("--data", required=True, help="genesis run directory")
    n.add_argument("--checkpoint")
    n.add_argument("--policy", choices=POLICIES, default="evolved")
    n.add_argument("--experience", choices=EXPERIENCE_MODES)
    n.add_argument("--episodes", type=int)
    n.add_argument("--kind", choices=("goal", "qa"), default="goal")
    n.add_argument("--t-max", dest="t_max", type=int)

    v = sub.add_parser("eval", help="recompute metrics and render the report figure")
    common(v)
    v.add_argument("--episodes", required=True, help="episodes.jsonl")
    return p


COMMANDS = {"genesis": cmd_genesis, "evolve": cmd_evolve, "navigate": cmd_navigate, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "episodes", None) is not None and isinstance(args.episodes, int) and args.episodes < 0:
            raise UsageError("--episodes must be >= 0")
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"sage: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteGradient, FloatingPointError) as exc:
        print(f"sage: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GridFormatError, EmptyRecords, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"sage: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

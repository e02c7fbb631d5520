"""Command-line entry point: gen, plan, exec, experiment, score.

Configuration is layered: built-in defaults, then ``--config FILE`` (JSON),
then ``SYMSPACE_<SECTION>__<KEY>`` environment variables, then repeated
``--set section.key=value`` flags. Unknown sections or keys are rejected.
Values given as strings are parsed as JSON when possible.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import multiprocessing as mp
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cmaes import CmaConfig
from .executor import (
    SUMMARY_COLUMNS,
    NoiseModel,
    TrialRow,
    execute,
    feasible_area,
    format_csv,
    run_trials,
    summarize,
    tercile_groups,
)
from .export import field_image, partition_image, write_pgm, write_ppm
from .feasibility import FeasibilityParams
from .partition import CandidateLimits, format_report
from .planner import (
    CostParams,
    NoPlan,
    PlannerConfig,
    PlannerMode,
    PlanningContext,
    candidate_set,
    dumps_plan,
    plan,
    plan_from_dict,
)
from .world import GeneratorConfig, generate_scenario, load_scenario, save_scenario

ENV_PREFIX = "SYMSPACE_"
DETAIL_COLUMNS = ("scenario", "mode", "trial", "group", "completion", "time", "planned")
JOURNAL_VERSION = 1

# planner fields that live directly on PlannerConfig
_PLANNER_KEYS = ("top_k", "draws", "sequence_limit", "pose_mode", "score_weighting",
                 "initial_step_fraction", "warm_start")
_SECTIONS: dict[str, type] = {
    "generator": GeneratorConfig,
    "feasibility": FeasibilityParams,
    "cost": CostParams,
    "limits": CandidateLimits,
    "cma": CmaConfig,
    "noise": NoiseModel,
}


class InputError(Exception):
    """Bad user input: unreadable file, unknown config key, invalid value."""


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def default_config() -> dict[str, dict[str, Any]]:
    cfg = {name: {k: _jsonable(v) for k, v in dataclasses.asdict(cls()).items()}
           for name, cls in _SECTIONS.items()}
    cfg["cma"].pop("bounds")  # derived per location by the planner
    pc = PlannerConfig()
    cfg["planner"] = {k: getattr(pc, k) for k in _PLANNER_KEYS}
    cfg["run"] = {"workers": os.cpu_count() or 1}
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply(cfg: dict, section: str, key: str, value, origin: str) -> None:
    if section not in cfg:
        raise InputError(f"{origin}: unknown config section {section!r}")
    if key not in cfg[section]:
        raise InputError(f"{origin}: unknown config key {section}.{key}")
    cfg[section][key] = value


def resolve_config(config_path: str | None, sets: Sequence[str], environ=None) -> dict:
    """Merge defaults, config file, environment and --set overrides."""
    environ = os.environ if environ is None else environ
    cfg = default_config()
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise InputError(f"cannot read config {config_path}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise InputError(f"config {config_path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise InputError(f"config {config_path} must be a JSON object")
        for section, values in data.items():
            if not isinstance(values, dict):
                raise InputError(f"{config_path}: section {section!r} must be an object")
            for k, v in values.items():
                _apply(cfg, section, k, v, config_path)
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        section, sep, key = name[len(ENV_PREFIX):].lower().partition("__")
        if not sep:
            raise InputError(f"environment variable {name} must look like {ENV_PREFIX}SECTION__KEY")
        _apply(cfg, section, key, _parse_value(environ[name]), name)
    for item in sets:
        path, eq, raw = item.partition("=")
        section, dot, key = path.partition(".")
        if not eq or not dot:
            raise InputError(f"--set expects section.key=value, got {item!r}")
        _apply(cfg, section, key, _parse_value(raw), "--set")
    return cfg


def _build(cls, values: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            v = values[f.name]
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kwargs[f.name] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid {cls.__name__}: {e}") from e


def generator_config(cfg: dict) -> GeneratorConfig:
    return _build(GeneratorConfig, cfg["generator"])


def noise_model(cfg: dict) -> NoiseModel:
    return _build(NoiseModel, cfg["noise"])


def planner_config(cfg: dict, workers: int | None = None) -> PlannerConfig:
    try:
        return PlannerConfig(
            cost=_build(CostParams, cfg["cost"]),
            feasibility=_build(FeasibilityParams, cfg["feasibility"]),
            limits=_build(CandidateLimits, cfg["limits"]),
            cma=_build(CmaConfig, cfg["cma"]),
            workers=workers if workers is not None else int(cfg["run"]["workers"]),
            **cfg["planner"],
        )
    except (TypeError, ValueError) as e:
        raise InputError(f"invalid planner config: {e}") from e


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _echo(out: Path, cfg: dict, command: str, args: dict, started: float) -> None:
    _write_json(_sidecar(out, ".config.json"), {"command": command, "args": args, "config": cfg})
    _write_json(_sidecar(out, ".timing.json"), {"command": command, "wall_seconds": time.time() - started})


def _load_scenario(path: str):
    try:
        return load_scenario(path)
    except OSError as e:
        raise InputError(f"cannot read scenario {path}: {e.strerror}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"malformed scenario {path}: {e}") from e


def _mode(name: str) -> PlannerMode:
    try:
        return PlannerMode(name.upper())
    except ValueError:
        raise InputError(f"unknown mode {name!r}; choose from {', '.join(m.value for m in PlannerMode)}") from None


# --------------------------------------------------------------------------
# commands

def cmd_gen(args, cfg) -> int:
    started = time.time()
    out = Path(args.out_dir)
    if not out.is_dir():
        raise InputError(f"output directory does not exist: {out}")
    gcfg = generator_config(cfg)
    seeds = range(args.seed, args.seed + args.count)
    paths = [out / f"scenario_{s}.txt" for s in seeds]
    clash = [p for p in paths if p.exists()]
    if clash and not args.overwrite:
        raise InputError(f"{clash[0]} exists; pass --overwrite to replace")
    for s, p in zip(seeds, paths):
        save_scenario(generate_scenario(s, gcfg), p)
    _echo(out / "gen", cfg, "gen", vars_of(args), started)
    print(f"wrote {len(paths)} scenario(s) to {out}")
    return 0


def cmd_plan(args, cfg) -> int:
    started = time.time()
    sc = _load_scenario(args.scenario)
    mode = _mode(args.mode)
    pcfg = planner_config(cfg, args.workers)
    out = Path(args.out)
    ctx = PlanningContext.build(sc, pcfg.feasibility)
    if args.emit_heatmaps:
        stem = out.with_suffix("")
        for o in sc.objects:
            write_pgm(f"{stem}_{o.id}.pgm", field_image(ctx.fields[o.id]))
    try:
        result = plan(sc, mode, pcfg, seed=args.seed, ctx=ctx)
    except NoPlan as e:
        _echo(out, cfg, "plan", vars_of(args), started)
        print(f"no plan: {e}", file=sys.stderr)
        return 2
    out.write_text(dumps_plan(result))
    if args.emit_heatmaps:
        ss = _state_space_by_id(ctx, pcfg, args.seed, result.plan.state_space_id)
        write_ppm(f"{out.with_suffix('')}_partition.ppm", partition_image(ss, ctx.occ))
    _echo(out, cfg, "plan", vars_of(args), started)
    _write_json(_sidecar(out, ".timing.json"),
                {"command": "plan", "planning_seconds": result.planning_time,
                 "wall_seconds": time.time() - started})
    p = result.plan
    print(f"{mode.value}: utility {p.utility:.3f}, {p.nav_count} nav, {len(p.picks)} pick, "
          f"state space {p.state_space_id}")
    return 0


def _state_space_by_id(ctx, pcfg, seed, ss_id):
    if ss_id == ctx.base.id:
        return ctx.base
    for ss, _ in candidate_set(ctx, pcfg, seed).ranked:
        if ss.id == ss_id:
            return ss
    return ctx.base


def cmd_exec(args, cfg) -> int:
    started = time.time()
    sc = _load_scenario(args.scenario)
    try:
        result = plan_from_dict(json.loads(Path(args.plan).read_text()))
    except OSError as e:
        raise InputError(f"cannot read plan {args.plan}: {e.strerror}") from e
    except (ValueError, KeyError, TypeError) as e:
        raise InputError(f"malformed plan {args.plan}: {e}") from e
    pcfg = planner_config(cfg, 1)
    noise = noise_model(cfg)
    ctx = PlanningContext.build(sc, pcfg.feasibility)
    c = pcfg.cost
    out = Path(args.out)
    rows = []
    for k in range(args.trials):
        r = execute(result.plan, ctx, noise, np.random.default_rng([args.seed, 0, k]), c.v, c.gamma, c.delta)
        rows.append({"trial": k, "completion": r.completion_rate, "time": r.execution_time})
    out.write_text(format_csv(rows, ("trial", "completion", "time")))
    _echo(out, cfg, "exec", vars_of(args), started)
    comp = np.array([r["completion"] for r in rows])
    tm = np.array([r["time"] for r in rows])
    print(f"completion {comp.mean():.4f} +- {comp.std():.4f}, time {tm.mean():.2f} +- {tm.std():.2f} s")
    return 0


def cmd_score(args, cfg) -> int:
    started = time.time()
    sc = _load_scenario(args.scenario)
    pcfg = planner_config(cfg, 1)
    ctx = PlanningContext.build(sc, pcfg.feasibility)
    report = format_report(candidate_set(ctx, pcfg, args.seed))
    if args.out:
        out = Path(args.out)
        out.write_text(report)
        _echo(out, cfg, "score", vars_of(args), started)
    else:
        sys.stdout.write(report)
    return 0


# experiment harness ---------------------------------------------------------

_EXP_STATE = None


def _experiment_unit(unit):
    scenarios, labels, pcfg, noise, trials, seed = _EXP_STATE
    i, mode = unit
    rows = run_trials(scenarios[i], i, mode, pcfg, noise, trials, seed)
    for r in rows:
        r.group = labels[i]
    return i, mode, rows


def _row_dict(r: TrialRow) -> dict:
    return dataclasses.asdict(r)


def _read_journal(path: Path, header: dict) -> dict[tuple[int, str], list[dict]]:
    done: dict[tuple[int, str], list[dict]] = {}
    if not path.exists():
        return done
    lines = path.read_text().splitlines()
    if not lines:
        return done
    try:
        first = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise InputError(f"journal {path} is corrupt: {e}") from e
    if first != header:
        raise InputError(f"journal {path} belongs to a different experiment; delete it to start over")
    for line in lines[1:]:
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            break  # torn final write from an interrupted run
        done[(rec["scenario"], rec["mode"])] = rec["rows"]
    return done


def cmd_experiment(args, cfg) -> int:
    started = time.time()
    sdir = Path(args.scenario_dir)
    if not sdir.is_dir():
        raise InputError(f"scenario directory does not exist: {sdir}")
    files = sorted(sdir.glob("scenario_*.txt"), key=lambda p: (len(p.name), p.name))
    if not files:
        raise InputError(f"no scenario_*.txt files in {sdir}")
    modes = [_mode(m).value for m in args.modes.split(",") if m]
    if not modes:
        raise InputError("--modes is empty")
    if args.trials < 1:
        raise InputError("--trials must be >= 1")
    pcfg = planner_config(cfg, 1)
    noise = noise_model(cfg)
    scenarios = [_load_scenario(str(p)) for p in files]
    labels = tercile_groups([feasible_area(PlanningContext.build(s, pcfg.feasibility)) for s in scenarios])

    out = Path(args.out)
    digest = hashlib.sha256(json.dumps({k: v for k, v in cfg.items() if k != "run"},
                                       sort_keys=True).encode()).hexdigest()
    header = {"journal": JOURNAL_VERSION, "config": digest, "seed": args.seed, "trials": args.trials,
              "modes": modes, "scenarios": [p.name for p in files]}
    journal = _sidecar(out, ".journal")
    done = _read_journal(journal, header)
    if not done:
        journal.write_text(json.dumps(header) + "\n")
    pending = [(i, m) for i in range(len(scenarios)) for m in modes if (i, m) not in done]

    global _EXP_STATE
    _EXP_STATE = (scenarios, labels, pcfg, noise, args.trials, args.seed)
    workers = max(1, args.workers if args.workers is not None else int(cfg["run"]["workers"]))
    try:
        with journal.open("a") as jf:
            def record(i, mode, rows):
                done[(i, mode)] = [_row_dict(r) for r in rows]
                jf.write(json.dumps({"scenario": i, "mode": mode, "rows": done[(i, mode)]}) + "\n")
                jf.flush()

            if workers > 1 and len(pending) > 1:
                with ProcessPoolExecutor(workers, mp_context=mp.get_context("fork")) as ex:
                    for i, mode, rows in ex.map(_experiment_unit, pending):
                        record(i, mode, rows)
            else:
                for unit in pending:
                    record(*_experiment_unit(unit))
    finally:
        _EXP_STATE = None

    all_rows = [TrialRow(**d) for i in range(len(scenarios)) for m in modes for d in done[(i, m)]]
    stem = out.with_suffix("")
    for m in modes:
        detail = [_row_dict(r) for r in all_rows if r.mode == m]
        Path(f"{stem}_{m}.csv").write_text(format_csv(detail, DETAIL_COLUMNS))
    out.write_text(format_csv(summarize(all_rows, modes), SUMMARY_COLUMNS))
    _echo(out, cfg, "experiment", vars_of(args), started)
    for r in summarize(all_rows, modes):
        if r["group"] == "All":
            print(f"{r['mode']:<14} completion {r['mean_completion']:.4f}  time {r['mean_time']:.2f} s")
    return 0


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------

def vars_of(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors: exit 1 (2 is reserved for 'no plan')."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="symspace", description=__doc__.splitlines()[0],
                                allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with config overrides")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    g = sub.add_parser("gen", help="generate scenario files", allow_abbrev=False)
    common(g)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--out-dir", required=True)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen)

    pl = sub.add_parser("plan", help="plan one scenario", allow_abbrev=False)
    common(pl)
    pl.add_argument("--scenario", required=True)
    pl.add_argument("--mode", default=PlannerMode.S3O_GROP_STAR.value)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", required=True)
    pl.add_argument("--emit-heatmaps", action="store_true",
                    help="write one PGM per object and a partition PPM next to the plan")
    pl.add_argument("--workers", type=int)
    pl.set_defaults(func=cmd_plan)

    ex = sub.add_parser("exec", help="Monte-Carlo execute a plan file", allow_abbrev=False)
    common(ex)
    ex.add_argument("--scenario", required=True)
    ex.add_argument("--plan", required=True)
    ex.add_argument("--trials", type=int, default=100)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_exec)

    e = sub.add_parser("experiment", help="scenario x mode x trial sweep", allow_abbrev=False)
    common(e)
    e.add_argument("--scenario-dir", required=True)
    e.add_argument("--modes", default="S3O_GROP_STAR,V_GROP")
    e.add_argument("--trials", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="summary CSV; per-mode detail CSVs go alongside")
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_experiment)

    s = sub.add_parser("score", help="rank candidate state spaces", allow_abbrev=False)
    common(s)
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else 1
    try:
        cfg = resolve_config(args.config, args.set)
        return args.func(args, cfg)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e.filename}: {e.strerror}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

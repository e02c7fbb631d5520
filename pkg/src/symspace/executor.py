"""Monte-Carlo execution of grounded plans under actuation noise."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .planner import (
    GroundedPlan,
    Nav,
    NoPlan,
    Pick,
    PlannerConfig,
    PlannerMode,
    PlanningContext,
    plan,
)
from .world import Pose2D, Scenario

GROUP_NAMES = ("Easy", "Moderate", "Difficult")
SUMMARY_COLUMNS = ("mode", "group", "mean_completion", "std_completion", "mean_time", "std_time", "trials")
LANDING_RETRIES = 10


@dataclass(frozen=True)
class NoiseModel:
    nav_sigma: float = 0.05
    reach_sigma: float = 0.02

    def __post_init__(self):
        if self.nav_sigma < 0 or self.reach_sigma < 0:
            raise ValueError("noise standard deviations must be >= 0")


@dataclass
class ExecutionResult:
    per_object_success: dict[str, bool]
    completion_rate: float
    execution_time: float
    trace: list[Pose2D] = field(default_factory=list)


def _land(goal: Pose2D, prev: Pose2D, ctx: PlanningContext, sigma: float, rng) -> Pose2D:
    if sigma <= 0:
        return goal
    for _ in range(LANDING_RETRIES):
        dx, dy = rng.normal(0.0, sigma, size=2)
        p = Pose2D(goal.x + float(dx), goal.y + float(dy))
        if ctx.nav.is_free(p) and math.isfinite(ctx.nav.length(prev, p)):
            return p
    return goal


def pick_probability(feasibility: float, reach_error: float, reach_sigma: float) -> float:
    if reach_sigma <= 0:
        return feasibility
    return feasibility * math.exp(-reach_error ** 2 / (2 * reach_sigma ** 2 * 25))


def execute(gplan: GroundedPlan, ctx: PlanningContext, noise: NoiseModel, rng: np.random.Generator,
            v: float = 0.4, gamma: float = 20.0, delta: float = 5.0) -> ExecutionResult:
    """Run one stochastic rollout. Failed picks leave the object on the table."""
    success = {o.id: False for o in ctx.scenario.objects}
    prev = ctx.scenario.robot_start
    t = 0.0
    trace = []
    for step in gplan.steps:
        if isinstance(step, Nav):
            landing = _land(step.to, prev, ctx, noise.nav_sigma, rng)
            length = ctx.nav.length(prev, landing)
            t += length / v + gamma
            prev = landing
            trace.append(landing)
        elif isinstance(step, Pick):
            t += delta
            err = abs(float(rng.normal(0.0, noise.reach_sigma))) if noise.reach_sigma > 0 else 0.0
            p = pick_probability(ctx.fields[step.object].at(prev), err, noise.reach_sigma)
            if rng.random() < p:
                success[step.object] = True
            trace.append(prev)
        else:
            raise TypeError(f"unknown step {step!r}")
    done = sum(success.values())
    return ExecutionResult(success, done / len(success), t, trace)


def feasible_area(ctx: PlanningContext) -> float:
    """Reachable area (m^2) from which at least one object can be picked."""
    mask = np.zeros(ctx.occ.size, dtype=bool)
    for f in ctx.fields.values():
        mask |= f.values.ravel() > 0
    res = ctx.scenario.map.resolution
    return float((mask & ctx.reachable).sum()) * res * res


def tercile_groups(difficulty_area: Sequence[float]) -> list[str]:
    """Group label per task: largest feasible area is easiest; remainders go to easier groups."""
    n = len(difficulty_area)
    order = sorted(range(n), key=lambda i: -difficulty_area[i])
    base, extra = divmod(n, 3)
    sizes = [base + (1 if g < extra else 0) for g in range(3)]
    labels = [""] * n
    pos = 0
    for g, size in enumerate(sizes):
        for i in order[pos:pos + size]:
            labels[i] = GROUP_NAMES[g]
        pos += size
    return labels


@dataclass
class TrialRow:
    scenario: int
    mode: str
    trial: int
    completion: float
    time: float
    group: str = ""
    planned: bool = True


def run_trials(scenario: Scenario, index: int, mode: PlannerMode, cfg: PlannerConfig, noise: NoiseModel,
               trials: int, seed: int, ctx: PlanningContext | None = None) -> list[TrialRow]:
    """Plan once for ``scenario`` then execute ``trials`` rollouts."""
    mode = PlannerMode(mode)
    ctx = ctx or PlanningContext.build(scenario, cfg.feasibility)
    try:
        result = plan(scenario, mode, cfg, seed=seed, ctx=ctx)
    except NoPlan:
        return [TrialRow(index, mode.value, k, 0.0, 0.0, planned=False) for k in range(trials)]
    rows = []
    c = cfg.cost
    for k in range(trials):
        rng = np.random.default_rng([seed, index, k])
        r = execute(result.plan, ctx, noise, rng, c.v, c.gamma, c.delta)
        rows.append(TrialRow(index, mode.value, k, r.completion_rate, r.execution_time))
    return rows


def _std(x: np.ndarray) -> float:
    """Population std; shifting by the first value keeps identical samples at exactly 0."""
    return float((x - x[0]).std())


def summarize(rows: Sequence[TrialRow], modes: Sequence[str] | None = None) -> list[dict]:
    """Per (mode, group) mean and population std of completion and time, plus an 'All' row."""
    modes = list(modes) if modes is not None else sorted({r.mode for r in rows})
    out = []
    for m in modes:
        for g in GROUP_NAMES + ("All",):
            sel = [r for r in rows if r.mode == m and (g == "All" or r.group == g)]
            if not sel:
                continue
            comp = np.array([r.completion for r in sel])
            tm = np.array([r.time for r in sel])
            out.append({
                "mode": m, "group": g,
                "mean_completion": float(comp.mean()), "std_completion": _std(comp),
                "mean_time": float(tm.mean()), "std_time": _std(tm),
                "trials": len(sel),
            })
    return out


def evaluate(mode, scenarios: Sequence[Scenario], trials: int, cfg: PlannerConfig | None = None,
             noise: NoiseModel | None = None, seed: int = 0) -> list[dict]:
    """Summary table for one mode over a scenario batch, grouped by difficulty tercile."""
    if not scenarios:
        raise ValueError("scenario batch is empty")
    cfg = cfg or PlannerConfig()
    noise = noise or NoiseModel()
    ctxs = [PlanningContext.build(sc, cfg.feasibility) for sc in scenarios]
    labels = tercile_groups([feasible_area(c) for c in ctxs])
    rows = []
    for i, (sc, ctx) in enumerate(zip(scenarios, ctxs)):
        for r in run_trials(sc, i, mode, cfg, noise, trials, seed, ctx):
            r.group = labels[i]
            rows.append(r)
    return summarize(rows, [PlannerMode(mode).value])


def format_csv(rows: Sequence[dict], columns: Sequence[str] = SUMMARY_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()

"""Task-motion planning over ranked symbolic state spaces.

The pipeline for the default mode: feasibility fields -> Voronoi base
partition -> merged candidates -> score and keep the top K -> draw task
planners by normalized score -> enumerate visit orders -> optimize standing
poses per order with CMA-ES against plan utility -> argmax.
"""

from __future__ import annotations

import json
import math
import multiprocessing as mp
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .cmaes import CMAES, CmaConfig
from .feasibility import FeasibilityField, FeasibilityParams, build_fields
from .partition import (
    CandidateLimits,
    CandidateSet,
    StateSpace,
    adjacency,
    base_voronoi,
    enumerate_candidates,
    rank_and_select,
    score_candidates,
)
from .taskplan import SymbolicState, TaskSequence, enumerate_sequences
from .world import NavGrid, Pose2D, Scenario

PLAN_FORMAT = "symspace-plan/1"
# finite stand-in for -inf utility when ranking CMA-ES samples
FITNESS_FLOOR = -1e12


class InfeasibleSequence(RuntimeError):
    pass


class NoPlan(RuntimeError):
    pass


class PlannerMode(str, Enum):
    S3O_GROP_STAR = "S3O_GROP_STAR"
    S3O_GROP = "S3O_GROP"
    V_GROP_STAR = "V_GROP_STAR"
    V_GROP = "V_GROP"
    V_PETLON = "V_PETLON"
    S3O_RANDOM = "S3O_RANDOM"

    @property
    def merges(self) -> bool:
        return self in (PlannerMode.S3O_GROP_STAR, PlannerMode.S3O_GROP, PlannerMode.S3O_RANDOM)

    @property
    def pose_strategy(self) -> str:
        if self in (PlannerMode.S3O_GROP, PlannerMode.V_GROP):
            return "smp"
        if self is PlannerMode.V_PETLON:
            return "uniform"
        return "cma"


@dataclass(frozen=True)
class CostParams:
    v: float = 0.4
    gamma: float = 20.0
    delta: float = 5.0
    lam: float = 150.0
    time_budget: float = 300.0
    sample_budget: int = 200

    def __post_init__(self):
        for k, val in asdict(self).items():
            if k in ("gamma", "delta"):
                if not val >= 0:
                    raise ValueError(f"{k} must be >= 0, got {val}")
            elif not val > 0:
                raise ValueError(f"{k} must be positive, got {val}")


@dataclass(frozen=True)
class PlannerConfig:
    cost: CostParams = field(default_factory=CostParams)
    feasibility: FeasibilityParams = field(default_factory=FeasibilityParams)
    limits: CandidateLimits = field(default_factory=CandidateLimits)
    cma: CmaConfig = field(default_factory=CmaConfig)
    top_k: int = 5
    draws: int = 5
    sequence_limit: int = 24
    pose_mode: str = "group"
    workers: int = 1
    score_weighting: str = "joint"
    # initial CMA-ES std per pose as a fraction of the location's bounding-box diagonal
    initial_step_fraction: float = 0.5
    # CMA-ES spends its first generation on feasibility-weighted draws and
    # starts from the best one, so a standing region split by furniture does
    # not trap it on the wrong side
    warm_start: bool = True

    def __post_init__(self):
        if self.pose_mode not in ("group", "object"):
            raise ValueError(f"pose_mode must be 'group' or 'object', got {self.pose_mode!r}")
        if self.top_k < 1 or self.draws < 1 or self.sequence_limit < 1 or self.workers < 1:
            raise ValueError("top_k, draws, sequence_limit and workers must be >= 1")


@dataclass(frozen=True)
class Nav:
    from_: Pose2D
    to: Pose2D
    length: float


@dataclass(frozen=True)
class Pick:
    object: str
    robot_pose: Pose2D
    object_pose: Pose2D
    feasibility: float


Step = Union[Nav, Pick]


@dataclass(frozen=True)
class GroundedPlan:
    steps: tuple[Step, ...]
    utility: float
    state_space_id: str = ""
    sequence_id: str = ""
    violations: int = 0
    trace: str = ""

    @property
    def nav_count(self) -> int:
        return sum(isinstance(s, Nav) for s in self.steps)

    @property
    def picks(self) -> list[Pick]:
        return [s for s in self.steps if isinstance(s, Pick)]


def action_cost(a: Step, params: CostParams) -> float:
    if isinstance(a, Nav):
        if not math.isfinite(a.length):
            return math.inf
        return a.length / params.v + params.gamma
    return params.delta


def action_reward(a: Step, params: CostParams, feasibility_weight: float = 1.0) -> float:
    if isinstance(a, Nav):
        return -action_cost(a, params)
    return -params.delta + feasibility_weight * a.feasibility * params.lam


def plan_objective(steps: Sequence[Step], violations: int, params: CostParams,
                   feasibility_weight: float = 1.0) -> float:
    total = 0.0
    for s in steps:
        total += action_reward(s, params, feasibility_weight)
    return total - violations * params.lam


def recompute_utility(plan: GroundedPlan, params: CostParams) -> float:
    return plan_objective(plan.steps, plan.violations, params)


# --------------------------------------------------------------------------
# per-scenario context

@dataclass(eq=False)
class PlanningContext:
    scenario: Scenario
    occ: np.ndarray
    nav: NavGrid
    fields: dict[str, FeasibilityField]
    base: StateSpace
    object_pose: dict[str, Pose2D]
    reachable: np.ndarray  # flat bool, cells reachable from the robot start

    @classmethod
    def build(cls, scenario: Scenario, params: FeasibilityParams | None = None,
              provider=None) -> PlanningContext:
        params = params or FeasibilityParams()
        occ = scenario.occupancy()
        nav = NavGrid(occ, scenario.map.resolution)
        if provider is None:
            from .feasibility import KernelProvider
            provider = KernelProvider(params)
        fields = build_fields(scenario, occ, provider)
        base = base_voronoi(scenario, occ, params)
        reachable = nav.reachable_from(scenario.robot_start).ravel()
        return cls(scenario, occ, nav, fields, base,
                   {o.id: o.position for o in scenario.objects}, reachable)


@dataclass(frozen=True)
class PoseVariable:
    """One (x, y) decision: the standing pose for a visit (or a single object)."""

    location: str
    objects: tuple[str, ...]


def pose_variables(seq: TaskSequence, pose_mode: str = "group") -> list[PoseVariable]:
    out = []
    for loc, objs in seq.groups():
        if pose_mode == "group":
            out.append(PoseVariable(loc, tuple(objs)))
        else:
            out.extend(PoseVariable(loc, (o,)) for o in objs)
    return out


def ground_sequence(seq: TaskSequence, pose_vector, ctx: PlanningContext, ss: StateSpace,
                    params: CostParams, pose_mode: str = "group",
                    feasibility_weight: float = 1.0) -> GroundedPlan:
    """Chain standing poses into Nav/Pick steps and score them.

    A pose outside its visit's symbolic location costs ``lam`` per violation.
    A blocked or disconnected pose makes the plan's utility -inf.
    """
    variables = pose_variables(seq, pose_mode)
    vec = np.asarray(pose_vector, dtype=float).ravel()
    if vec.size != 2 * len(variables):
        raise ValueError(f"pose vector has {vec.size} entries, need {2 * len(variables)}")
    steps: list[Step] = []
    prev = ctx.scenario.robot_start
    violations = 0
    for k, var in enumerate(variables):
        p = Pose2D(float(vec[2 * k]), float(vec[2 * k + 1]))
        if not ctx.nav.is_free(p):
            steps.append(Nav(prev, p, math.inf))
            return GroundedPlan(tuple(steps), -math.inf, ss.id, str(seq.index), violations, seq.trace())
        length = ctx.nav.length(prev, p)
        steps.append(Nav(prev, p, length))
        if not math.isfinite(length):
            return GroundedPlan(tuple(steps), -math.inf, ss.id, str(seq.index), violations, seq.trace())
        if ss.sym(p) != var.location:
            violations += 1
        for o in var.objects:
            steps.append(Pick(o, p, ctx.object_pose[o], ctx.fields[o].at(p)))
        prev = p
    util = plan_objective(steps, violations, params)
    return GroundedPlan(tuple(steps), util, ss.id, str(seq.index), violations, seq.trace())


def _selection_value(plan: GroundedPlan, params: CostParams, feasibility_weight: float) -> float:
    if not math.isfinite(plan.utility):
        return -math.inf
    if feasibility_weight == 1.0:
        return plan.utility
    return plan_objective(plan.steps, plan.violations, params, feasibility_weight)


def _var_support(var: PoseVariable, ctx: PlanningContext, ss: StateSpace, positive: bool = True):
    """Candidate standing cells for a pose variable and their summed feasibility.

    Cells of the variable's location that are reachable from the robot start
    (and, with ``positive``, feasible for some of its objects). Falls back to
    all reachable location cells, then to the objects' reachable feasible
    disc when the location itself is empty.
    """
    flat = ss.sym_grid.ravel() == ss.location_index(var.location)
    w_all = np.zeros(ctx.occ.size)
    for o in var.objects:
        w_all += ctx.fields[o].values.ravel()
    base = flat & ctx.reachable
    tiers = [base & (w_all > 0), base] if positive else [base]
    tiers.append(ctx.reachable & (w_all > 0))
    for mask in tiers:
        cells = np.flatnonzero(mask)
        if cells.size:
            return cells, w_all[cells]
    raise InfeasibleSequence(f"no reachable standing cells for {var.objects}")


def _cell_centers(cells: np.ndarray, shape, res: float) -> np.ndarray:
    return np.stack([(cells % shape[1] + 0.5) * res, (cells // shape[1] + 0.5) * res], axis=-1)


@dataclass
class SequenceResult:
    plan: GroundedPlan
    value: float
    samples: int


class _Repair:
    """Projects a sampled pose onto the nearest support cell of its variable."""

    def __init__(self, cells: np.ndarray, shape, res: float):
        self.shape = shape
        self.res = res
        self.members = set(cells.tolist())
        self.xy = _cell_centers(cells, shape, res)
        self.tree = cKDTree(self.xy)

    def __call__(self, x: float, y: float) -> tuple[float, float, float]:
        """(x', y', distance moved)."""
        col = math.floor(x / self.res)
        row = math.floor(y / self.res)
        if 0 <= row < self.shape[0] and 0 <= col < self.shape[1] and row * self.shape[1] + col in self.members:
            return x, y, 0.0
        d, i = self.tree.query((x, y))
        return float(self.xy[i, 0]), float(self.xy[i, 1]), float(d)


def _weighted_draws(variables, ctx: PlanningContext, ss: StateSpace, rng, n: int,
                    positive: bool) -> np.ndarray:
    """``n`` pose vectors, each pose drawn from its support cells.

    With ``positive`` cells are drawn proportionally to feasibility, otherwise
    uniformly over reachable location cells.
    """
    res = ctx.scenario.map.resolution
    cols = []
    for var in variables:
        cells, w = _var_support(var, ctx, ss, positive=positive)
        if not positive or w.sum() <= 0:
            pick = rng.integers(cells.size, size=n)
        else:
            pick = rng.choice(cells.size, size=n, p=w / w.sum())
        cols.append(_cell_centers(cells[pick], ctx.occ.shape, res))
    return np.concatenate(cols, axis=1)


def optimize_sequence(seq: TaskSequence, ctx: PlanningContext, ss: StateSpace, cfg: PlannerConfig,
                      seed, strategy: str = "cma", feasibility_weight: float = 1.0) -> SequenceResult:
    """Best grounding of ``seq`` found within the per-sequence sample budget.

    ``strategy``: "cma" adapts a Gaussian over all standing poses; "smp"
    draws each pose cell proportionally to feasibility; "uniform" draws
    reachable location cells uniformly. Raises InfeasibleSequence when every
    sample grounds to -inf.

    CMA-ES samples that miss their variable's support (blocked, unreachable,
    outside the location or infeasible) are projected onto the nearest
    support cell before grounding; the optimizer is told the raw sample with
    ``lam * (1 + distance)`` subtracted per projected pose. With
    ``cfg.warm_start`` the first population is drawn by feasibility and CMA-ES
    starts at the best draw, with per-coordinate steps set to the spread of
    the better half of the draws (capped by the bounding-box step).
    """
    params = cfg.cost
    variables = pose_variables(seq, cfg.pose_mode)
    res = ctx.scenario.map.resolution
    shape = ctx.occ.shape
    best: GroundedPlan | None = None
    best_val = -math.inf
    spent = 0

    def consider(plan):
        nonlocal best, best_val
        val = _selection_value(plan, params, feasibility_weight)
        if best is None or val > best_val:
            best, best_val = plan, val
        return val

    if not variables:
        plan = GroundedPlan((), 0.0, ss.id, str(seq.index), 0, seq.trace())
        return SequenceResult(plan, 0.0, 0)

    if strategy == "cma":
        pop = cfg.cma.population
        gens = max(1, min(cfg.cma.max_generations, params.sample_budget // pop))
        warm = None
        if cfg.warm_start and gens > 1:
            rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 1])
            draws = _weighted_draws(variables, ctx, ss, rng, pop, positive=True)
            vals = np.array([consider(ground_sequence(seq, x, ctx, ss, params, cfg.pose_mode))
                             for x in draws])
            order = np.argsort(-vals, kind="stable")
            warm = draws[order[0]]
            warm_spread = draws[order[:max(2, pop // 2)]].std(axis=0)
            spent += pop
            gens -= 1
        mean, scales, bounds, repairs = [], [], [], []
        for var in variables:
            cells, w = _var_support(var, ctx, ss)
            xy = _cell_centers(cells, shape, res)
            rep = _Repair(cells, shape, res)
            c = (w @ xy) / w.sum() if w.sum() > 0 else xy.mean(axis=0)
            c = rep(*c)[:2]
            lo = xy.min(axis=0) - res / 2
            hi = xy.max(axis=0) + res / 2
            step = float(np.hypot(*(hi - lo))) * cfg.initial_step_fraction
            mean.extend(c)
            scales.extend([max(step, res), max(step, res)])
            bounds.extend([(lo[0], hi[0]), (lo[1], hi[1])])
            repairs.append(rep)
        if warm is not None:
            mean = list(warm)
            scales = list(np.clip(warm_spread, res, scales))
        es = CMAES(mean, replace(cfg.cma, max_generations=gens, bounds=tuple(bounds)),
                   seed=seed, scales=scales)
        while es.generation < gens:
            xs = es.ask()
            vals = []
            for x in xs:
                fixed = x.copy()
                penalty = 0.0
                for k, rep in enumerate(repairs):
                    px, py, moved = rep(x[2 * k], x[2 * k + 1])
                    if moved > 0:
                        fixed[2 * k], fixed[2 * k + 1] = px, py
                        penalty += params.lam * (1.0 + moved)
                v = consider(ground_sequence(seq, fixed, ctx, ss, params, cfg.pose_mode))
                vals.append(v - penalty if math.isfinite(v) else FITNESS_FLOOR)
            es.tell(xs, vals)
            spent += len(xs)
    elif strategy in ("smp", "uniform"):
        rng = np.random.default_rng(seed)
        n = params.sample_budget
        for x in _weighted_draws(variables, ctx, ss, rng, n, positive=strategy != "uniform"):
            consider(ground_sequence(seq, x, ctx, ss, params, cfg.pose_mode))
        spent = n
    else:
        raise ValueError(f"unknown pose strategy {strategy!r}")

    if best is None or not math.isfinite(best.utility):
        raise InfeasibleSequence(f"sequence {seq.index} on {ss.id}: every sample infeasible")
    return SequenceResult(best, best_val, spent)


# --------------------------------------------------------------------------
# full pipeline

@dataclass
class PlanResult:
    plan: GroundedPlan
    mode: PlannerMode
    seed: int
    diagnostics: dict
    planning_time: float = 0.0
    partial: bool = False


def _anchors(ss: StateSpace, ctx: PlanningContext) -> dict[str, tuple[float, float]]:
    out = {}
    for loc in ss.locations:
        ps = [ctx.object_pose[o] for o in ss.objects_at(loc)]
        out[loc] = (sum(p.x for p in ps) / len(ps), sum(p.y for p in ps) / len(ps))
    return out


def _run_item(ctx: PlanningContext, cfg: PlannerConfig, mode: PlannerMode, item: int,
              ss: StateSpace, seed: int, deadline: float):
    """Optimize every enumerated sequence of one drawn state space."""
    init = SymbolicState.initial(ss.object_assignment)
    start = ctx.scenario.robot_start
    seqs = enumerate_sequences(ss, init, cfg.sequence_limit, _anchors(ss, ctx), (start.x, start.y))
    fw = 0.0 if mode is PlannerMode.V_PETLON else 1.0
    log, best, best_val, spent, timed_out = [], None, -math.inf, 0, False
    for seq in seqs:
        if time.time() > deadline:
            timed_out = True
            break
        try:
            r = optimize_sequence(seq, ctx, ss, cfg, [seed, item, seq.index], mode.pose_strategy, fw)
        except InfeasibleSequence:
            log.append({"draw": item, "state_space": ss.id, "sequence": seq.index,
                        "utility": None, "value": None, "samples": cfg.cost.sample_budget})
            spent += cfg.cost.sample_budget
            continue
        spent += r.samples
        log.append({"draw": item, "state_space": ss.id, "sequence": seq.index,
                    "utility": r.plan.utility, "value": r.value, "samples": r.samples})
        if best is None or r.value > best_val:
            best, best_val = r.plan, r.value
    if best is not None:
        best = replace(best, sequence_id=f"{item}:{best.sequence_id}")
    return best, best_val, log, spent, len(seqs), timed_out


_WORKER_STATE = None


def _run_item_in_worker(args):
    ctx, cfg, mode, deadline = _WORKER_STATE
    item, ss, seed = args
    return _run_item(ctx, cfg, mode, item, ss, seed, deadline)


def _select_candidates(ctx: PlanningContext, mode: PlannerMode, cfg: PlannerConfig, seed: int, diag: dict):
    rng = np.random.default_rng([seed, 0xC0FFEE])
    if not mode.merges:
        diag["candidates_total"] = 1
        diag["candidates_scored"] = 0
        return [ctx.base] * cfg.draws
    edges = adjacency(ctx.base)
    cands = enumerate_candidates(ctx.base, edges, cfg.limits)
    diag["candidates_total"] = len(cands)
    if mode is PlannerMode.S3O_RANDOM:
        diag["candidates_scored"] = 0
        picks = rng.integers(len(cands), size=cfg.draws)
        return [cands[int(i)] for i in picks]
    scores = score_candidates(cands, ctx.fields, cfg.feasibility, seed, cfg.score_weighting)
    cset = rank_and_select(cands, scores, cfg.top_k)
    diag["candidates_scored"] = len(cands)
    diag["top_k"] = [
        {"state_space": ss.id, "score": sc, "weight": w}
        for (ss, sc), w in zip(cset.kept, cset.selection_weights)
    ]
    picks = rng.choice(cset.top_k, size=cfg.draws, p=np.array(cset.selection_weights))
    return [cset.kept[int(i)][0] for i in picks]


def candidate_set(ctx: PlanningContext, cfg: PlannerConfig, seed: int) -> CandidateSet:
    cands = enumerate_candidates(ctx.base, adjacency(ctx.base), cfg.limits)
    scores = score_candidates(cands, ctx.fields, cfg.feasibility, seed, cfg.score_weighting)
    return rank_and_select(cands, scores, cfg.top_k)


def plan(scenario: Scenario, mode: PlannerMode | str = PlannerMode.S3O_GROP_STAR,
         cfg: PlannerConfig | None = None, seed: int = 0, ctx: PlanningContext | None = None) -> PlanResult:
    """Plan a full collection task. Raises NoPlan when nothing feasible is found."""
    cfg = cfg or PlannerConfig()
    mode = PlannerMode(mode)
    t0 = time.time()
    deadline = t0 + cfg.cost.time_budget
    ctx = ctx or PlanningContext.build(scenario, cfg.feasibility)
    diag: dict = {"mode": mode.value, "seed": seed}
    drawn = _select_candidates(ctx, mode, cfg, seed, diag)
    diag["draws"] = [ss.id for ss in drawn]
    items = [(i, ss, seed) for i, ss in enumerate(drawn)]

    if cfg.workers > 1 and len(items) > 1:
        global _WORKER_STATE
        _WORKER_STATE = (ctx, cfg, mode, deadline)
        try:
            with ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("fork")) as ex:
                results = list(ex.map(_run_item_in_worker, items))
        finally:
            _WORKER_STATE = None
    else:
        results = [_run_item(ctx, cfg, mode, i, ss, s, deadline) for i, ss, s in items]

    best, best_val, log, spent, n_seq, partial = None, -math.inf, [], 0, 0, False
    for b, v, lg, sp, ns, to in results:
        log.extend(lg)
        spent += sp
        n_seq += len(lg)
        partial = partial or to
        if b is not None and (best is None or v > best_val):
            best, best_val = b, v
    diag["sequences_optimized"] = n_seq
    diag["samples_spent"] = spent
    diag["incumbents"] = log
    diag["partial"] = partial
    elapsed = time.time() - t0
    if best is None:
        raise NoPlan(f"no feasible plan for scenario seed {scenario.seed} in mode {mode.value}")
    return PlanResult(best, mode, seed, diag, elapsed, partial)


# --------------------------------------------------------------------------
# serialization

def _pose_dict(p: Pose2D) -> dict:
    return {"x": p.x, "y": p.y}


def step_to_dict(s: Step) -> dict:
    if isinstance(s, Nav):
        return {"type": "nav", "from": _pose_dict(s.from_), "to": _pose_dict(s.to), "length": s.length}
    return {"type": "pick", "object": s.object, "robot_pose": _pose_dict(s.robot_pose),
            "object_pose": _pose_dict(s.object_pose), "feasibility": s.feasibility}


def step_from_dict(d: dict) -> Step:
    P = lambda q: Pose2D(float(q["x"]), float(q["y"]))  # noqa: E731
    if d["type"] == "nav":
        return Nav(P(d["from"]), P(d["to"]), float(d["length"]))
    if d["type"] == "pick":
        return Pick(d["object"], P(d["robot_pose"]), P(d["object_pose"]), float(d["feasibility"]))
    raise ValueError(f"unknown step type {d['type']!r}")


def plan_to_dict(result: PlanResult) -> dict:
    p = result.plan
    return {
        "format": PLAN_FORMAT,
        "mode": result.mode.value,
        "seed": result.seed,
        "state_space_id": p.state_space_id,
        "sequence_id": p.sequence_id,
        "sequence": p.trace,
        "utility": p.utility,
        "location_violations": p.violations,
        "partial": result.partial,
        "steps": [step_to_dict(s) for s in p.steps],
        "diagnostics": result.diagnostics,
    }


def dumps_plan(result: PlanResult) -> str:
    return json.dumps(plan_to_dict(result), indent=1) + "\n"


def plan_from_dict(d: dict) -> PlanResult:
    if d.get("format") != PLAN_FORMAT:
        raise ValueError(f"unsupported plan format {d.get('format')!r}")
    gp = GroundedPlan(
        tuple(step_from_dict(s) for s in d["steps"]),
        float(d["utility"]),
        d.get("state_space_id", ""),
        d.get("sequence_id", ""),
        int(d.get("location_violations", 0)),
        d.get("sequence", ""),
    )
    return PlanResult(gp, PlannerMode(d["mode"]), int(d["seed"]), d.get("diagnostics", {}),
                      0.0, bool(d.get("partial", False)))

"""Object-centric Voronoi state spaces and merged-region candidates."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .feasibility import FeasibilityField, FeasibilityParams, task_feasibility
from .world import Pose2D, Scenario

UNLABELED = -1


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Symbolic locations plus the cell-level mapping from poses to locations.

    ``sym_grid`` holds the index into ``locations`` for every labeled cell and
    ``UNLABELED`` elsewhere. ``merged_from[i]`` lists the base-region ids
    (object indices) fused into location ``i``.
    """

    locations: tuple[str, ...]
    sym_grid: np.ndarray
    object_assignment: dict[str, str]
    merged_from: tuple[tuple[int, ...], ...]
    resolution: float
    id: str = "base"

    def __post_init__(self):
        g = np.asarray(self.sym_grid, dtype=np.int32)
        g.setflags(write=False)
        object.__setattr__(self, "sym_grid", g)

    def location_index(self, loc: int | str) -> int:
        if isinstance(loc, (int, np.integer)):
            if not 0 <= loc < len(self.locations):
                raise KeyError(loc)
            return int(loc)
        return self.locations.index(loc)

    def location_of(self, object_id: str) -> str:
        return self.object_assignment[object_id]

    def sym(self, pose: Pose2D) -> str | None:
        col = math.floor(pose.x / self.resolution)
        row = math.floor(pose.y / self.resolution)
        h, w = self.sym_grid.shape
        if not (0 <= row < h and 0 <= col < w):
            return None
        li = self.sym_grid[row, col]
        return None if li == UNLABELED else self.locations[li]

    def cell_mask(self, loc: int | str) -> np.ndarray:
        return self.sym_grid == self.location_index(loc)

    def objects_at(self, loc: str) -> list[str]:
        return [o for o, l in self.object_assignment.items() if l == loc]

    @property
    def grouping(self) -> tuple[tuple[int, ...], ...]:
        return self.merged_from


def _location_name(group: Sequence[int]) -> str:
    return "+".join(f"l{i}" for i in group)


def _grouping_id(groups: Sequence[Sequence[int]]) -> str:
    return "|".join(",".join(str(i) for i in g) for g in groups)


def nearest_object_labels(scenario: Scenario, occ: np.ndarray, reach_max: float) -> np.ndarray:
    """Per-cell index of the nearest object, UNLABELED when blocked or out of reach."""
    xs, ys = scenario.map.cell_centers()
    d = np.stack([np.hypot(xs - o.position.x, ys - o.position.y) for o in scenario.objects])
    nearest = np.argmin(d, axis=0)  # first minimum, i.e. lowest object index on ties
    dmin = np.take_along_axis(d, nearest[None], axis=0)[0]
    labels = np.where(~occ & (dmin <= reach_max), nearest, UNLABELED)
    return labels.astype(np.int32)


def base_voronoi(scenario: Scenario, occ: np.ndarray, params: FeasibilityParams | None = None) -> StateSpace:
    params = params or FeasibilityParams()
    labels = nearest_object_labels(scenario, occ, params.reach_max)
    n = len(scenario.objects)
    return StateSpace(
        locations=tuple(f"l{i}" for i in range(n)),
        sym_grid=labels,
        object_assignment={o.id: f"l{i}" for i, o in enumerate(scenario.objects)},
        merged_from=tuple((i,) for i in range(n)),
        resolution=scenario.map.resolution,
        id=_grouping_id([(i,) for i in range(n)]),
    )


def adjacency(base: StateSpace) -> set[tuple[int, int]]:
    """Undirected edges (i < j) between base locations whose cells 8-touch."""
    g = base.sym_grid
    h, w = g.shape
    edges: set[tuple[int, int]] = set()
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        a = g[0:h - dr, max(0, -dc):w - max(0, dc)]
        b = g[dr:h, max(0, dc):w - max(0, -dc)]
        m = (a != UNLABELED) & (b != UNLABELED) & (a != b)
        if m.any():
            pairs = np.unique(np.stack([np.minimum(a[m], b[m]), np.maximum(a[m], b[m])], axis=1), axis=0)
            edges.update((int(i), int(j)) for i, j in pairs)
    return edges


def _connected(group: Sequence[int], edges: set[tuple[int, int]]) -> bool:
    if len(group) <= 1:
        return True
    members = set(group)
    seen = {group[0]}
    stack = [group[0]]
    while stack:
        u = stack.pop()
        for v in members - seen:
            if (min(u, v), max(u, v)) in edges:
                seen.add(v)
                stack.append(v)
    return seen == members


def connected_groupings(n: int, edges: set[tuple[int, int]], max_group: int, limit: int | None = None):
    """Yield partitions of range(n) into connected groups, in lexicographic order.

    A partition is a tuple of sorted groups ordered by their smallest member.
    Depth-first search over lexicographically sorted group choices visits
    partitions in lexicographic order, so truncation at ``limit`` is stable.
    """
    count = 0

    def rec(remaining: tuple[int, ...], acc: list[tuple[int, ...]]):
        nonlocal count
        if limit is not None and count >= limit:
            return
        if not remaining:
            count += 1
            yield tuple(acc)
            return
        head, rest = remaining[0], remaining[1:]
        options = []
        for k in range(0, min(max_group, len(remaining)) ):
            for combo in itertools.combinations(rest, k):
                g = (head,) + combo
                if _connected(g, edges):
                    options.append(g)
        options.sort()
        for g in options:
            left = tuple(x for x in rest if x not in g)
            acc.append(g)
            yield from rec(left, acc)
            acc.pop()
            if limit is not None and count >= limit:
                return

    yield from rec(tuple(range(n)), [])


def merge(base: StateSpace, groups: Sequence[Sequence[int]]) -> StateSpace:
    """State space whose locations are unions of the given base regions."""
    lut = np.full(len(base.locations) + 1, UNLABELED, dtype=np.int32)
    names = []
    assignment = {}
    base_obj = {int(l[1:]): o for o, l in base.object_assignment.items()}
    for li, g in enumerate(groups):
        name = _location_name(g)
        names.append(name)
        for b in g:
            lut[b] = li
            assignment[base_obj[b]] = name
    # index -1 maps through lut[-1] which is UNLABELED
    grid = lut[base.sym_grid]
    return StateSpace(tuple(names), grid, assignment, tuple(tuple(g) for g in groups),
                      base.resolution, _grouping_id(groups))


@dataclass(frozen=True)
class CandidateLimits:
    max_group: int = 3
    max_candidates: int = 200
    single_merge: bool = False

    def __post_init__(self):
        if self.max_group < 1 or self.max_candidates < 1:
            raise ValueError("limits must be >= 1")


def enumerate_candidates(base: StateSpace, edges: set[tuple[int, int]],
                         limits: CandidateLimits | None = None) -> list[StateSpace]:
    limits = limits or CandidateLimits()
    n = len(base.locations)
    if limits.single_merge:
        groupings = [tuple((i,) for i in range(n))]
        if limits.max_group >= 2:
            for i, j in sorted(edges):
                rest = [(k,) for k in range(n) if k not in (i, j)]
                groupings.append(tuple(sorted(rest + [(i, j)])))
        groupings = sorted(groupings)[: limits.max_candidates]
    else:
        groupings = list(connected_groupings(n, edges, limits.max_group, limits.max_candidates))
    return [base if g == base.merged_from else merge(base, g) for g in groupings]


def location_weights(ss: StateSpace, fields: dict[str, FeasibilityField], loc: str,
                     weighting: str = "joint") -> np.ndarray | None:
    """Sampling weights for a location, or None to weight by each object's own field.

    With "joint", a location holding several objects is sampled by the
    product of their fields: where one standing pose can serve all of them.
    Single-object locations are self-weighted under either setting.
    """
    objs = ss.objects_at(loc)
    if weighting == "self" or len(objs) == 1:
        return None
    if weighting != "joint":
        raise ValueError(f"unknown weighting {weighting!r}")
    w = np.ones_like(fields[objs[0]].values)
    for o in objs:
        w = w * fields[o].values
    return w


def score_state_space(ss: StateSpace, fields: dict[str, FeasibilityField],
                      params: FeasibilityParams, rng: np.random.Generator,
                      weighting: str = "joint") -> float:
    """Sum over objects of task-level feasibility at the object's location."""
    total = 0.0
    weights: dict[str, np.ndarray | None] = {}
    for obj_id, loc in ss.object_assignment.items():
        if loc not in weights:
            weights[loc] = location_weights(ss, fields, loc, weighting)
        total += task_feasibility(fields[obj_id], ss, loc, params, rng, weights[loc])
    return total


@dataclass
class CandidateSet:
    ranked: list[tuple[StateSpace, float]]
    top_k: int
    selection_weights: list[float] = field(default_factory=list)

    @property
    def kept(self) -> list[tuple[StateSpace, float]]:
        return self.ranked[: self.top_k]


def rank_and_select(candidates: Sequence[StateSpace], scores: Sequence[float], k: int = 5) -> CandidateSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        raise ValueError("no candidates to rank")
    if len(candidates) != len(scores):
        raise ValueError("candidates and scores differ in length")
    order = sorted(range(len(candidates)), key=lambda i: -scores[i])  # stable on ties
    ranked = [(candidates[i], float(scores[i])) for i in order]
    kept = min(k, len(ranked))
    s = np.array([sc for _, sc in ranked[:kept]])
    weights = s / s.sum() if s.sum() > 0 else np.full(kept, 1.0 / kept)
    return CandidateSet(ranked, kept, [float(w) for w in weights])


def score_candidates(candidates: Sequence[StateSpace], fields, params: FeasibilityParams,
                     seed: int, weighting: str = "joint") -> list[float]:
    """Score every candidate with its own rng stream (seed, candidate index)."""
    return [
        score_state_space(ss, fields, params, np.random.default_rng([seed, i]), weighting)
        for i, ss in enumerate(candidates)
    ]


def format_report(cset: CandidateSet) -> str:
    lines = ["rank\tscore\tweight\tstate_space\tlocations"]
    for r, (ss, sc) in enumerate(cset.ranked):
        w = f"{cset.selection_weights[r]:.6f}" if r < cset.top_k else "-"
        lines.append(f"{r}\t{sc:.6f}\t{w}\t{ss.id}\t{' '.join(ss.locations)}")
    return "\n".join(lines) + "\n"

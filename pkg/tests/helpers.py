"""Scene builders and independent oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np
from skimage.graph import MCP_Geometric

from symspace.world import GridMap, ObjectState, Pose2D, Scenario


def open_scene(objects, tables, size=(6.0, 4.0), res=0.1, inflation=0.2, start=(0.5, 0.5),
               walls=True, chairs=()):
    """Scenario with rectangular tables (xmin, ymin, xmax, ymax) and objects given as (x, y)."""
    w, h = int(round(size[0] / res)), int(round(size[1] / res))
    occ = np.zeros((h, w), dtype=bool)
    if walls:
        occ[0, :] = occ[-1, :] = occ[:, 0] = occ[:, -1] = True
    xs = (np.arange(w) + 0.5) * res
    ys = (np.arange(h) + 0.5) * res
    for x0, y0, x1, y1 in tables:
        occ[np.ix_((ys >= y0) & (ys <= y1), (xs >= x0) & (xs <= x1))] = True
    objs = tuple(ObjectState(f"o{i}", Pose2D(*p)) for i, p in enumerate(objects))
    return Scenario(GridMap(occ, res, inflation), objs, Pose2D(*start), tuple(chairs), 0, tuple(tables))


def grid_distances(occ: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """8-connected geometric distance (cell units) from ``start`` via scikit-image's MCP."""
    costs = np.where(occ, np.inf, 1.0)
    mcp = MCP_Geometric(costs, fully_connected=True)
    dist, _ = mcp.find_costs([start])
    return dist


def brute_nearest_labels(scenario, occ, reach_max):
    """Per-cell nearest object index by explicit loops (-1 if blocked or beyond reach)."""
    res = scenario.map.resolution
    h, w = occ.shape
    out = np.full((h, w), -1, dtype=int)
    for r in range(h):
        for c in range(w):
            if occ[r, c]:
                continue
            x, y = (c + 0.5) * res, (r + 0.5) * res
            best, best_d = -1, math.inf
            for i, o in enumerate(scenario.objects):
                d = math.hypot(x - o.position.x, y - o.position.y)
                if d < best_d:
                    best, best_d = i, d
            if best_d <= reach_max:
                out[r, c] = best
    return out


def single_object_oracle(ctx, params):
    """Best utility of goto+pickup over every free reachable standing cell."""
    sc = ctx.scenario
    res = sc.map.resolution
    start = sc.map.cell_of(sc.robot_start)
    dist = grid_distances(ctx.occ, start) * res
    (f,) = ctx.fields.values()
    util = -(dist / params.v + params.gamma) - params.delta + f.values * params.lam
    util = np.where(np.isfinite(dist) & ~ctx.occ, util, -np.inf)
    return float(util.max())


def near_pair_far_one_scene():
    """Two objects a hand-span apart on one table, a third far away on another."""
    return open_scene(
        [(2.3, 2.8), (2.7, 2.8), (6.4, 1.0)],
        [(1.5, 2.6, 3.5, 3.0), (6.0, 0.8, 6.8, 1.2)],
        size=(8.0, 4.0), start=(0.5, 0.5),
    )


def chain_problems(plan, scenario):
    """List of chaining defects in a grounded plan (empty when well formed)."""
    from symspace.planner import Nav, Pick

    issues = []
    prev = scenario.robot_start
    picked = []
    for s in plan.steps:
        if isinstance(s, Nav):
            if s.from_ != prev:
                issues.append(f"nav starts at {s.from_}, expected {prev}")
            prev = s.to
        elif isinstance(s, Pick):
            if s.robot_pose != prev:
                issues.append(f"pick of {s.object} away from the last landing pose")
            picked.append(s.object)
    if sorted(picked) != sorted(o.id for o in scenario.objects):
        issues.append(f"picked {picked}")
    return issues

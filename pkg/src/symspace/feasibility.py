"""Motion- and task-level pick feasibility.

Motion feasibility is a procedural stand-in for a learned heatmap model:
a clearance gate times a piecewise-linear reach profile. Anything that can
produce a per-cell grid in [0, 1] (see :class:`FeasibilityProvider`) can be
swapped in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .world import GridMap, ObjectState, Pose2D


class EmptySupportError(ValueError):
    """A location has no cell with positive feasibility for the object."""


@dataclass(frozen=True)
class FeasibilityParams:
    reach_min: float = 0.3
    reach_full_lo: float = 0.35
    reach_full_hi: float = 0.7
    reach_max: float = 1.0
    sample_count: int = 200

    def __post_init__(self):
        if not (0 <= self.reach_min < self.reach_full_lo <= self.reach_full_hi < self.reach_max):
            raise ValueError(
                "need 0 <= reach_min < reach_full_lo <= reach_full_hi < reach_max, got "
                f"{self.reach_min}, {self.reach_full_lo}, {self.reach_full_hi}, {self.reach_max}"
            )
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")


def reach_profile(d, params: FeasibilityParams):
    """Piecewise-linear reach factor; works on scalars and arrays."""
    d = np.asarray(d, dtype=float)
    p = params
    up = (d - p.reach_min) / (p.reach_full_lo - p.reach_min)
    down = (p.reach_max - d) / (p.reach_max - p.reach_full_hi)
    out = np.minimum(np.minimum(up, down), 1.0)
    out = np.where((d < p.reach_min) | (d > p.reach_max), 0.0, out)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def motion_feasibility(
    y_r: Pose2D, y_o: Pose2D, occ: np.ndarray, resolution: float, params: FeasibilityParams
) -> float:
    """Feasibility of picking the object at ``y_o`` while standing at ``y_r``."""
    col = math.floor(y_r.x / resolution)
    row = math.floor(y_r.y / resolution)
    h, w = occ.shape
    if not (0 <= row < h and 0 <= col < w) or occ[row, col]:
        return 0.0
    return reach_profile(y_r.dist(y_o), params)


@dataclass(frozen=True, eq=False)
class FeasibilityField:
    object_id: str
    values: np.ndarray
    resolution: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def at(self, pose: Pose2D) -> float:
        """Value of the cell containing ``pose`` (0 off-grid)."""
        col = math.floor(pose.x / self.resolution)
        row = math.floor(pose.y / self.resolution)
        h, w = self.values.shape
        if 0 <= row < h and 0 <= col < w:
            return float(self.values[row, col])
        return 0.0


class FeasibilityProvider(Protocol):
    def __call__(self, obj: ObjectState, occ: np.ndarray, map: GridMap) -> FeasibilityField: ...


def build_field(
    obj: ObjectState, occ: np.ndarray, map: GridMap, params: FeasibilityParams | None = None
) -> FeasibilityField:
    params = params or FeasibilityParams()
    xs, ys = map.cell_centers()
    d = np.hypot(xs - obj.position.x, ys - obj.position.y)
    values = np.where(occ, 0.0, reach_profile(d, params))
    return FeasibilityField(obj.id, values, map.resolution)


class KernelProvider:
    """Default provider backed by :func:`build_field`."""

    def __init__(self, params: FeasibilityParams | None = None):
        self.params = params or FeasibilityParams()

    def __call__(self, obj, occ, map):
        return build_field(obj, occ, map, self.params)


def build_fields(scenario, occ=None, provider: FeasibilityProvider | None = None) -> dict[str, FeasibilityField]:
    occ = scenario.occupancy() if occ is None else occ
    provider = provider or KernelProvider()
    return {o.id: provider(o, occ, scenario.map) for o in scenario.objects}


def _location_weights(values: np.ndarray, sym_grid: np.ndarray, loc: int):
    cells = np.flatnonzero(sym_grid.ravel() == loc)
    return cells, values.ravel()[cells]


def sample_cells(values: np.ndarray, sym_grid: np.ndarray, loc: int, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Flat cell indices drawn with replacement, proportional to ``values``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cells, w = _location_weights(values, sym_grid, loc)
    total = w.sum()
    if cells.size == 0 or total <= 0:
        raise EmptySupportError(f"location {loc} has zero feasibility mass")
    return cells[rng.choice(cells.size, size=n, p=w / total)]


def sample_positions_smp(field: FeasibilityField, sym, loc: int | str, n: int,
                         rng: np.random.Generator) -> list[Pose2D]:
    """Feasibility-weighted standing positions inside location ``loc``."""
    li = sym.location_index(loc)
    flat = sample_cells(field.values, sym.sym_grid, li, n, rng)
    w = field.values.shape[1]
    res = field.resolution
    return [Pose2D((c % w + 0.5) * res, (c // w + 0.5) * res) for c in flat]


def task_feasibility(field: FeasibilityField, sym, loc: int | str,
                     params: FeasibilityParams, rng: np.random.Generator,
                     weight: np.ndarray | None = None) -> float:
    """Mean motion feasibility over ``params.sample_count`` weighted draws; 0 on empty support.

    Positions are drawn proportionally to ``field`` itself unless a separate
    ``weight`` grid is given (used for locations holding several objects).
    """
    li = sym.location_index(loc)
    w = field.values if weight is None else weight
    try:
        flat = sample_cells(w, sym.sym_grid, li, params.sample_count, rng)
    except EmptySupportError:
        return 0.0
    return float(field.values.ravel()[flat].mean())


def expected_task_feasibility(values: np.ndarray, sym_grid: np.ndarray, loc: int,
                              weight: np.ndarray | None = None) -> float:
    """Closed form of the sampled estimator: sum(w f) / sum(w), which is sum(f^2) / sum(f) when w = f."""
    _, f = _location_weights(values, sym_grid, loc)
    w = f if weight is None else _location_weights(weight, sym_grid, loc)[1]
    s = w.sum()
    return float((w * f).sum() / s) if s > 0 else 0.0


def to_gray8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)


def feasible_mask(fields: Sequence[FeasibilityField] | dict) -> np.ndarray:
    fs = list(fields.values()) if isinstance(fields, dict) else list(fields)
    mask = np.zeros(fs[0].values.shape, dtype=bool)
    for f in fs:
        mask |= f.values > 0
    return mask

"""2D restaurant-style world: occupancy grid, tables, objects, chairs.

Cell ``(row, col)`` covers ``[col*res, (col+1)*res) x [row*res, (row+1)*res)``
in world meters, so row indexes ``y`` and column indexes ``x``.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

SCENARIO_FORMAT = "symspace-scenario/1"
SQRT2 = math.sqrt(2.0)

# 8-connected moves (drow, dcol, cost in cells)
_MOVES = (
    (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
    (-1, -1, SQRT2), (-1, 1, SQRT2), (1, -1, SQRT2), (1, 1, SQRT2),
)


class ScenarioError(ValueError):
    """Scenario generation or validation failed."""


class BlockedEndpointError(ValueError):
    """A path query started or ended in a blocked cell."""


UNREACHABLE = math.inf


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite pose ({self.x}, {self.y})")

    def dist(self, other: Pose2D) -> float:
        return math.hypot(self.x - other.x, self.y - other.y)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ObjectState:
    id: str
    position: Pose2D
    collected: bool = False


@dataclass(frozen=True)
class ChairObstacle:
    position: Pose2D
    orientation: float
    width: float = 0.45
    depth: float = 0.45

    def __post_init__(self):
        if self.width <= 0 or self.depth <= 0:
            raise ValueError("chair footprint dimensions must be positive")

    def contains(self, x: float, y: float) -> bool:
        """Point-in-rotated-rectangle test."""
        dx, dy = x - self.position.x, y - self.position.y
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return abs(u) <= self.width / 2 and abs(v) <= self.depth / 2


@dataclass(frozen=True, eq=False)
class GridMap:
    """Static prior map. ``static_occupancy`` holds tables and walls only."""

    static_occupancy: np.ndarray
    resolution: float = 0.05
    inflation_radius: float = 0.3

    def __post_init__(self):
        occ = np.asarray(self.static_occupancy, dtype=bool)
        if occ.ndim != 2 or occ.shape[0] < 1 or occ.shape[1] < 1:
            raise ValueError("static_occupancy must be a non-empty 2D grid")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.inflation_radius < 0:
            raise ValueError("inflation_radius must be non-negative")
        occ.setflags(write=False)
        object.__setattr__(self, "static_occupancy", occ)

    @property
    def height_cells(self) -> int:
        return self.static_occupancy.shape[0]

    @property
    def width_cells(self) -> int:
        return self.static_occupancy.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.static_occupancy.shape

    def __eq__(self, other):
        if not isinstance(other, GridMap):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.inflation_radius == other.inflation_radius
            and np.array_equal(self.static_occupancy, other.static_occupancy)
        )

    def cell_of(self, pose: Pose2D) -> tuple[int, int] | None:
        """Cell containing ``pose``; None when off-grid."""
        col = math.floor(pose.x / self.resolution)
        row = math.floor(pose.y / self.resolution)
        if 0 <= row < self.height_cells and 0 <= col < self.width_cells:
            return (row, col)
        return None

    def center(self, row: int, col: int) -> Pose2D:
        return Pose2D((col + 0.5) * self.resolution, (row + 0.5) * self.resolution)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(xs, ys) arrays of cell-center coordinates, each shaped like the grid."""
        rows, cols = np.indices(self.shape)
        return (cols + 0.5) * self.resolution, (rows + 0.5) * self.resolution


@dataclass(frozen=True, eq=False)
class Scenario:
    map: GridMap
    objects: tuple[ObjectState, ...]
    robot_start: Pose2D
    chairs: tuple[ChairObstacle, ...] = ()
    seed: int = 0
    # tables as (xmin, ymin, xmax, ymax); informational, occupancy is authoritative
    tables: tuple[tuple[float, float, float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "chairs", tuple(self.chairs))
        object.__setattr__(self, "tables", tuple(tuple(t) for t in self.tables))
        if not self.objects:
            raise ScenarioError("scenario needs at least one object")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate object ids: {ids}")

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return scenario_to_dict(self) == scenario_to_dict(other)

    def object_index(self, object_id: str) -> int:
        for i, o in enumerate(self.objects):
            if o.id == object_id:
                return i
        raise KeyError(object_id)

    def occupancy(self) -> np.ndarray:
        return effective_occupancy(self.map, self.chairs)


def rasterize_chairs(map: GridMap, chairs: Sequence[ChairObstacle]) -> np.ndarray:
    xs, ys = map.cell_centers()
    mask = np.zeros(map.shape, dtype=bool)
    for ch in chairs:
        dx, dy = xs - ch.position.x, ys - ch.position.y
        c, s = math.cos(ch.orientation), math.sin(ch.orientation)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        mask |= (np.abs(u) <= ch.width / 2) & (np.abs(v) <= ch.depth / 2)
    return mask


def inflate(blocked: np.ndarray, radius_cells: float) -> np.ndarray:
    """Block every cell whose center is within ``radius_cells`` of a blocked center."""
    if not blocked.any():
        return blocked.copy()
    if radius_cells <= 0:
        return blocked.copy()
    dist = ndimage.distance_transform_edt(~blocked)
    # small epsilon so cells at exactly the radius count as inside
    return dist <= radius_cells + 1e-9


def effective_occupancy(map: GridMap, chairs: Sequence[ChairObstacle] = ()) -> np.ndarray:
    """Planning-time occupancy: static map plus sensed chairs, inflated."""
    raw = map.static_occupancy | rasterize_chairs(map, chairs)
    occ = inflate(raw, map.inflation_radius / map.resolution)
    occ.setflags(write=False)
    return occ


def _octile(a: tuple[int, int], b: tuple[int, int]) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (SQRT2 - 1.0) * min(dr, dc) + max(dr, dc)


def path_length_cells(occ: np.ndarray, start: tuple[int, int], goal: tuple[int, int]) -> float:
    """8-connected A* over free cells, result in cell units (inf if disconnected)."""
    h, w = occ.shape
    if occ[start] or occ[goal]:
        raise BlockedEndpointError(f"blocked endpoint: start={start} goal={goal}")
    if start == goal:
        return 0.0
    g = {start: 0.0}
    closed = set()
    heap = [(_octile(start, goal), 0.0, start)]
    while heap:
        _, gc, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            return gc
        closed.add(cur)
        r, c = cur
        for dr, dc, cost in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w) or occ[nr, nc]:
                continue
            nxt = (nr, nc)
            ng = gc + cost
            if ng < g.get(nxt, math.inf):
                g[nxt] = ng
                heapq.heappush(heap, (ng + _octile(nxt, goal), ng, nxt))
    return UNREACHABLE


def path_length(occ: np.ndarray, resolution: float, start: Pose2D, goal: Pose2D) -> float:
    """Shortest 8-connected grid path length in meters, or ``UNREACHABLE``.

    Raises BlockedEndpointError when either endpoint is blocked or off-grid.
    """
    h, w = occ.shape
    cells = []
    for p in (start, goal):
        rc = (math.floor(p.y / resolution), math.floor(p.x / resolution))
        if not (0 <= rc[0] < h and 0 <= rc[1] < w):
            raise BlockedEndpointError(f"pose {p} is off the grid")
        cells.append(rc)
    return path_length_cells(occ, cells[0], cells[1]) * resolution


class NavGrid:
    """Cached single-source distance fields over a fixed occupancy grid.

    Answers the same query as :func:`path_length` but amortizes work across
    the many repeated queries made by the planner and executor. Lengths are
    always computed from the lower-indexed endpoint so the answer for a pair
    never depends on what happens to be cached.
    """

    def __init__(self, occ: np.ndarray, resolution: float, cache_size: int = 2048):
        self.occ = np.asarray(occ, dtype=bool)
        self.resolution = resolution
        self.shape = self.occ.shape
        self.cache_size = cache_size
        self._cache: OrderedDict[int, np.ndarray] = OrderedDict()
        self._graph = self._build_graph()

    def _build_graph(self):
        h, w = self.shape
        free = ~self.occ
        idx = np.arange(h * w).reshape(h, w)
        rows, cols, vals = [], [], []
        # each undirected edge once: right, down, down-right, down-left
        for dr, dc, cost in ((0, 1, 1.0), (1, 0, 1.0), (1, 1, SQRT2), (1, -1, SQRT2)):
            r0, r1 = 0, h - dr
            c0, c1 = max(0, -dc), w - max(0, dc)
            a = free[r0:r1, c0:c1] & free[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
            src = idx[r0:r1, c0:c1][a]
            dst = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc][a]
            rows.append(src)
            cols.append(dst)
            vals.append(np.full(src.size, cost))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        n = h * w
        return coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()

    def cell_of(self, pose: Pose2D) -> tuple[int, int] | None:
        col = math.floor(pose.x / self.resolution)
        row = math.floor(pose.y / self.resolution)
        if 0 <= row < self.shape[0] and 0 <= col < self.shape[1]:
            return (row, col)
        return None

    def is_free(self, pose: Pose2D) -> bool:
        rc = self.cell_of(pose)
        return rc is not None and not self.occ[rc]

    def field_from(self, cell: tuple[int, int]) -> np.ndarray:
        """Distances (cell units) from ``cell`` to every cell, flat row-major."""
        key = cell[0] * self.shape[1] + cell[1]
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        d = dijkstra(self._graph, directed=False, indices=key)
        d.setflags(write=False)
        self._cache[key] = d
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return d

    def length_cells(self, a: tuple[int, int], b: tuple[int, int]) -> float:
        if self.occ[a] or self.occ[b]:
            raise BlockedEndpointError(f"blocked endpoint: {a} {b}")
        if a == b:
            return 0.0
        ka = a[0] * self.shape[1] + a[1]
        kb = b[0] * self.shape[1] + b[1]
        if kb < ka:
            a, kb = b, ka
        return float(self.field_from(a)[kb])

    def length(self, start: Pose2D, goal: Pose2D) -> float:
        """Path length in meters (inf when disconnected)."""
        a, b = self.cell_of(start), self.cell_of(goal)
        if a is None or b is None:
            raise BlockedEndpointError(f"off-grid endpoint: {start} {goal}")
        return self.length_cells(a, b) * self.resolution

    def reachable_from(self, pose: Pose2D) -> np.ndarray:
        """Boolean grid of cells reachable from ``pose`` (uncached)."""
        rc = self.cell_of(pose)
        if rc is None or self.occ[rc]:
            return np.zeros(self.shape, dtype=bool)
        d = dijkstra(self._graph, directed=False, indices=rc[0] * self.shape[1] + rc[1])
        return np.isfinite(d).reshape(self.shape)


# --------------------------------------------------------------------------
# scenario generation

@dataclass(frozen=True)
class GeneratorConfig:
    width_m: float = 8.0
    height_m: float = 6.0
    resolution: float = 0.05
    inflation_radius: float = 0.3
    # (xmin, ymin, xmax, ymax): one long bar table, two mid-sized, four small
    tables: tuple[tuple[float, float, float, float], ...] = (
        (1.0, 5.0, 4.6, 5.6),
        (1.0, 2.6, 2.6, 3.5),
        (4.4, 2.6, 6.0, 3.5),
        (5.8, 4.6, 6.6, 5.4),
        (6.8, 1.0, 7.4, 1.8),
        (2.6, 0.6, 3.4, 1.2),
        (4.2, 0.6, 5.0, 1.2),
    )
    robot_start: tuple[float, float] = (0.6, 0.6)
    min_objects: int = 5
    max_objects: int = 7
    object_edge_margin: float = 0.05
    object_min_separation: float = 0.15
    chairs_per_object: int = 1
    chair_width: float = 0.45
    chair_depth: float = 0.45
    chair_offset: tuple[float, float] = (0.3, 0.75)
    chair_lateral: float = 0.35
    reach_max: float = 1.0
    max_retries: int = 50

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.chairs_per_object < 0:
            raise ValueError("chairs_per_object must be >= 0")


def build_static_map(cfg: GeneratorConfig) -> GridMap:
    res = cfg.resolution
    w = int(round(cfg.width_m / res))
    h = int(round(cfg.height_m / res))
    occ = np.zeros((h, w), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    xs = (np.arange(w) + 0.5) * res
    ys = (np.arange(h) + 0.5) * res
    for x0, y0, x1, y1 in cfg.tables:
        cols = (xs >= x0) & (xs <= x1)
        rows = (ys >= y0) & (ys <= y1)
        occ[np.ix_(rows, cols)] = True
    return GridMap(occ, res, cfg.inflation_radius)


def _nearest_edge_normal(table, x, y):
    """Outward unit normal of the table edge closest to (x, y)."""
    x0, y0, x1, y1 = table
    gaps = [(x - x0, (-1.0, 0.0)), (x1 - x, (1.0, 0.0)), (y - y0, (0.0, -1.0)), (y1 - y, (0.0, 1.0))]
    return min(gaps, key=lambda g: g[0])[1]


def _draw_scenario(seed: int, cfg: GeneratorConfig, rng: np.random.Generator, base: GridMap) -> Scenario:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    tables = list(cfg.tables)
    objects: list[ObjectState] = []
    placed = 0
    attempts = 0
    while placed < n:
        attempts += 1
        if attempts > 1000:
            raise ScenarioError(f"seed {seed}: could not place {n} objects")
        t = tables[int(rng.integers(len(tables)))]
        m = cfg.object_edge_margin
        x = float(rng.uniform(t[0] + m, t[2] - m))
        y = float(rng.uniform(t[1] + m, t[3] - m))
        p = Pose2D(x, y)
        rc = base.cell_of(p)
        if rc is None or not base.static_occupancy[rc]:
            continue
        if any(p.dist(o.position) < cfg.object_min_separation for o in objects):
            continue
        objects.append(ObjectState(f"o{placed}", p))
        placed += 1
    chairs: list[ChairObstacle] = []
    start = Pose2D(*cfg.robot_start)
    for o in objects:
        for _ in range(cfg.chairs_per_object):
            t = next(tb for tb in tables
                     if tb[0] <= o.position.x <= tb[2] and tb[1] <= o.position.y <= tb[3])
            nx, ny = _nearest_edge_normal(t, o.position.x, o.position.y)
            off = float(rng.uniform(*cfg.chair_offset))
            lat = float(rng.uniform(-cfg.chair_lateral, cfg.chair_lateral))
            cx = o.position.x + nx * off - ny * lat
            cy = o.position.y + ny * off + nx * lat
            theta = float(rng.uniform(0.0, math.pi))
            chairs.append(ChairObstacle(Pose2D(cx, cy), theta, cfg.chair_width, cfg.chair_depth))
    return Scenario(base, tuple(objects), start, tuple(chairs), seed, tuple(cfg.tables))


def degenerate_reason(sc: Scenario, reach_max: float = 1.0) -> str | None:
    """Why a scenario is unusable, or None when every invariant holds."""
    occ = sc.occupancy()
    res = sc.map.resolution
    for o in sc.objects:
        rc = sc.map.cell_of(o.position)
        if rc is None or not sc.map.static_occupancy[rc]:
            return f"object {o.id} is not on a table cell"
    rc = sc.map.cell_of(sc.robot_start)
    if rc is None or occ[rc]:
        return "robot start is blocked"
    reach = NavGrid(occ, res).reachable_from(sc.robot_start)
    xs, ys = sc.map.cell_centers()
    d = np.stack([np.hypot(xs - o.position.x, ys - o.position.y) for o in sc.objects])
    nearest = np.argmin(d, axis=0)
    for i, o in enumerate(sc.objects):
        # strictly inside reach_max so the feasibility kernel is nonzero there
        if not np.any(reach & (d[i] < reach_max)):
            return f"object {o.id} has no reachable standing cell"
        if not np.any(reach & (d[i] < reach_max) & (nearest == i)):
            return f"object {o.id} has an empty reachable Voronoi region"
    return None


def generate_scenario(seed: int, config: GeneratorConfig | None = None) -> Scenario:
    cfg = config or GeneratorConfig()
    base = build_static_map(cfg)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        sc = _draw_scenario(seed, cfg, rng, base)
        if degenerate_reason(sc, cfg.reach_max) is None:
            return sc
    raise ScenarioError(f"seed {seed}: retry cap {cfg.max_retries} exceeded")


# --------------------------------------------------------------------------
# serialization

def _grid_rows(occ: np.ndarray) -> list[str]:
    return ["".join("1" if v else "0" for v in row) for row in occ]


def _rows_grid(rows: Sequence[str]) -> np.ndarray:
    return np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)


def _pose(d) -> Pose2D:
    return Pose2D(float(d["x"]), float(d["y"]))


def scenario_to_dict(sc: Scenario) -> dict:
    m = sc.map
    return {
        "format": SCENARIO_FORMAT,
        "seed": sc.seed,
        "map": {
            "width": m.width_cells,
            "height": m.height_cells,
            "resolution": m.resolution,
            "inflation_radius": m.inflation_radius,
            "rows": _grid_rows(m.static_occupancy),
        },
        "tables": [list(t) for t in sc.tables],
        "robot_start": {"x": sc.robot_start.x, "y": sc.robot_start.y},
        "objects": [
            {"id": o.id, "x": o.position.x, "y": o.position.y, "collected": o.collected}
            for o in sc.objects
        ],
        "chairs": [
            {"x": c.position.x, "y": c.position.y, "orientation": c.orientation,
             "width": c.width, "depth": c.depth}
            for c in sc.chairs
        ],
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("format") != SCENARIO_FORMAT:
        raise ScenarioError(f"unsupported scenario format {d.get('format')!r}")
    md = d["map"]
    occ = _rows_grid(md["rows"])
    if occ.shape != (md["height"], md["width"]):
        raise ScenarioError(f"map rows are {occ.shape}, header says {(md['height'], md['width'])}")
    gm = GridMap(occ, float(md["resolution"]), float(md["inflation_radius"]))
    objects = tuple(ObjectState(o["id"], _pose(o), bool(o.get("collected", False))) for o in d["objects"])
    chairs = tuple(
        ChairObstacle(_pose(c), float(c["orientation"]), float(c["width"]), float(c["depth"]))
        for c in d["chairs"]
    )
    return Scenario(gm, objects, _pose(d["robot_start"]), chairs, int(d["seed"]),
                    tuple(tuple(float(v) for v in t) for t in d.get("tables", ())))


def dumps_scenario(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=1) + "\n"


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(sc), encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

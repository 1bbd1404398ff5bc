"""Geodesic search, trajectory keypoints and the step-limited path follower."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .gridworld import (
    DEFAULT_HFOV,
    DEFAULT_RANGE,
    VIEW_OFFSETS,
    Cell,
    CellState,
    OccupancyGrid,
    Pose,
    visible_cells,
    wrap_angle,
)

SQRT2 = math.sqrt(2.0)
_MOVES = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
DEFAULT_MAX_LENGTH = 20.0
DEFAULT_DELTA_MAX = 1.0
DEFAULT_PROXIMITY = 0.5


class StartOrGoalUnsafe(ValueError):
    pass


class EmptySafeSpace(ValueError):
    pass


class TrajectoryTooShort(ValueError):
    pass


class NoPath(RuntimeError):
    pass


def neighbors(cell: Cell, passable) -> Iterable[tuple[Cell, float]]:
    """8-connected moves; a diagonal needs both orthogonal cells passable."""
    x, y = cell
    for dx, dy in _MOVES:
        n = (x + dx, y + dy)
        if not passable(n):
            continue
        if dx and dy and not (passable((x + dx, y)) and passable((x, y + dy))):
            continue
        yield n, (SQRT2 if dx and dy else 1.0)


def octile(a: Cell, b: Cell) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)


@dataclass
class Trajectory:
    waypoints: list[Pose]
    cells: list[Cell]
    length: float
    keypoints: list[int] = field(default_factory=list)
    traj_id: str = ""
    scene: str = ""

    @property
    def keypoint_count(self) -> int:
        return len(self.keypoints)

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.traj_id,
                "scene": self.scene,
                "waypoints": [[p.x, p.y, p.theta] for p in self.waypoints],
                "length_m": self.length,
                "keypoints": list(self.keypoints),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str, resolution: float) -> "Trajectory":
        d = json.loads(line)
        poses = [Pose(*w) for w in d["waypoints"]]
        cells = [p.cell(resolution) for p in poses]
        return cls(poses, cells, d["length_m"], d["keypoints"], d["id"], d["scene"])


def path_length(cells: Sequence[Cell], resolution: float) -> float:
    n_diag = sum(1 for a, b in zip(cells, cells[1:]) if a[0] != b[0] and a[1] != b[1])
    n_orth = len(cells) - 1 - n_diag
    return resolution * (n_orth + n_diag * SQRT2)


def trajectory_from_cells(grid: OccupancyGrid, cells: list[Cell]) -> Trajectory:
    """Attach headings: each waypoint faces the next; the last keeps its predecessor's."""
    poses = []
    for i, c in enumerate(cells):
        if i + 1 < len(cells):
            n = cells[i + 1]
            theta = math.atan2(n[1] - c[1], n[0] - c[0])
        elif i > 0:
            theta = poses[-1].theta
        else:
            theta = 0.0
        x, y = grid.cell_center(c)
        poses.append(Pose(x, y, wrap_angle(theta)))
    return Trajectory(poses, list(cells), path_length(cells, grid.resolution))


def astar(grid: OccupancyGrid, safe: set[Cell], start: Cell, goal: Cell) -> Trajectory | None:
    """Shortest 8-connected path inside ``safe`` with the octile heuristic.

    Open-list ties resolve on (f, h, cell index). Returns None when the goal
    is unreachable.
    """
    if start not in safe or goal not in safe:
        raise StartOrGoalUnsafe(f"start {start} or goal {goal} outside safe space")
    passable = safe.__contains__
    w = grid.width
    g_cost = {start: 0.0}
    parent: dict[Cell, Cell | None] = {start: None}
    h0 = octile(start, goal)
    open_heap = [(h0, h0, start[1] * w + start[0], start)]
    closed: set[Cell] = set()
    while open_heap:
        _, _, _, cur = heapq.heappop(open_heap)
        if cur in closed:
            continue
        if cur == goal:
            path = []
            node: Cell | None = cur
            while node is not None:
                path.append(node)
                node = parent[node]
            path.reverse()
            return trajectory_from_cells(grid, path)
        closed.add(cur)
        gc = g_cost[cur]
        for n, step in neighbors(cur, passable):
            if n in closed:
                continue
            ng = gc + step
            if ng < g_cost.get(n, math.inf) - 1e-12:
                g_cost[n] = ng
                parent[n] = cur
                h = octile(n, goal)
                heapq.heappush(open_heap, (ng + h, h, n[1] * w + n[0], n))
    return None


@dataclass
class EndpointSample:
    start: Cell | None
    goal: Cell | None
    trajectory: Trajectory | None
    reason: str | None = None  # None when accepted

    @property
    def accepted(self) -> bool:
        return self.reason is None


def sample_task_endpoints(
    grid: OccupancyGrid,
    safe: set[Cell],
    rng_seed,
    max_length: float = DEFAULT_MAX_LENGTH,
) -> EndpointSample:
    """Draw a uniform (start, goal) pair from ``safe`` and plan between them."""
    if not safe:
        raise EmptySafeSpace("safe space is empty")
    cells = sorted(safe, key=lambda c: (c[1], c[0]))
    rng = np.random.default_rng(rng_seed)
    i, j = rng.integers(len(cells), size=2)
    start, goal = cells[int(i)], cells[int(j)]
    traj = astar(grid, safe, start, goal)
    if traj is None:
        return EndpointSample(start, goal, None, "NotFound")
    if traj.length >= max_length:
        return EndpointSample(start, goal, traj, "TooLong")
    return EndpointSample(start, goal, traj)


@dataclass(frozen=True)
class ObservationView:
    heading: float
    cells: frozenset
    objects: tuple = ()  # indices into the scene's object list
    labels: tuple = ()

    def describe(self) -> str:
        return ", ".join(self.labels)


@dataclass(frozen=True)
class ObservationTriplet:
    step: int
    waypoint: int
    pose: Pose
    forward: ObservationView
    left: ObservationView
    right: ObservationView

    @property
    def views(self) -> tuple[ObservationView, ObservationView, ObservationView]:
        return self.forward, self.left, self.right


def _view(grid, pose, offset, objects, hfov, range_m) -> ObservationView:
    heading = wrap_angle(pose.theta + offset)
    cells = visible_cells(grid, Pose(pose.x, pose.y, heading), hfov, range_m)
    idx = tuple(i for i, o in enumerate(objects) if tuple(o.cell) in cells)
    return ObservationView(heading, frozenset(cells), idx, tuple(objects[i].label for i in idx))


def choose_keypoints(n_waypoints: int, rng: np.random.Generator, max_keypoints: int = 9) -> list[int]:
    """Endpoints plus 1..(max_keypoints - 2) interior waypoints drawn without replacement."""
    if n_waypoints < 2:
        raise TrajectoryTooShort("need at least two waypoints")
    interior = n_waypoints - 2
    cap = min(interior, max_keypoints - 2)
    if cap <= 0:
        return [0, n_waypoints - 1]
    k = int(rng.integers(1, cap + 1))
    picked = rng.choice(np.arange(1, n_waypoints - 1), size=k, replace=False)
    return [0, *sorted(int(p) for p in picked), n_waypoints - 1]


def discretize(
    traj: Trajectory,
    rng_seed,
    grid: OccupancyGrid,
    objects: Sequence = (),
    hfov: float = DEFAULT_HFOV,
    range_m: float = DEFAULT_RANGE,
) -> list[ObservationTriplet]:
    """Pick keypoints along ``traj`` and render forward/left/right views at each.

    ``objects`` is any sequence of items with ``cell`` and ``label``. The
    chosen keypoint indices are written back to ``traj.keypoints``.
    """
    if len(traj.waypoints) < 2:
        raise TrajectoryTooShort("need at least two waypoints")
    rng = np.random.default_rng(rng_seed)
    keys = choose_keypoints(len(traj.waypoints), rng)
    traj.keypoints = keys
    out = []
    for t, wi in enumerate(keys):
        pose = traj.waypoints[wi]
        views = [_view(grid, pose, z, objects, hfov, range_m) for z in VIEW_OFFSETS]
        out.append(ObservationTriplet(t, wi, pose, *views))
    return out


# ---------------------------------------------------------------- geodesics


def _passable_mask(grid: OccupancyGrid) -> np.ndarray:
    return grid.cells == CellState.FREE


def grid_graph(passable: np.ndarray):
    """Sparse 8-connected graph (no corner cutting) over passable cells, in cell units."""
    h, w = passable.shape
    idx = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for dx, dy in _MOVES:
        ys0, ys1 = max(0, -dy), h - max(0, dy)
        xs0, xs1 = max(0, -dx), w - max(0, dx)
        a = passable[ys0:ys1, xs0:xs1]
        b = passable[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
        ok = a & b
        if dx and dy:
            ok &= passable[ys0:ys1, xs0 + dx : xs1 + dx] & passable[ys0 + dy : ys1 + dy, xs0:xs1]
        src = idx[ys0:ys1, xs0:xs1][ok]
        dst = idx[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx][ok]
        rows.append(src)
        cols.append(dst)
        vals.append(np.full(len(src), SQRT2 if dx and dy else 1.0))
    rows_a, cols_a, vals_a = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    return coo_matrix((vals_a, (rows_a, cols_a)), shape=(h * w, h * w)).tocsr()


def geodesic_field(passable: np.ndarray, sources: Iterable[Cell], resolution: float = 1.0, graph=None) -> np.ndarray:
    """Shortest 8-connected distance (metres when ``resolution`` is given) to the nearest source."""
    h, w = passable.shape
    src = [c[1] * w + c[0] for c in sources if passable[c[1], c[0]]]
    if not src:
        return np.full((h, w), np.inf)
    if graph is None:
        graph = grid_graph(passable)
    d = dijkstra(graph, directed=True, indices=src, min_only=True)
    return d.reshape(h, w) * resolution


def descend(field: np.ndarray, passable: np.ndarray, start: Cell) -> list[Cell]:
    """Follow a distance field downhill from ``start`` to a zero cell."""
    if not np.isfinite(field[start[1], start[0]]):
        raise NoPath(f"no path from {start}")
    ok = lambda c: 0 <= c[0] < passable.shape[1] and 0 <= c[1] < passable.shape[0] and bool(passable[c[1], c[0]])
    path = [start]
    cur = start
    while field[cur[1], cur[0]] > 1e-9:
        here = field[cur[1], cur[0]]
        best = None
        for n, step in neighbors(cur, ok):
            # stay on a shortest path: d(n) + step == d(cur)
            if abs(field[n[1], n[0]] + step - here) < 1e-9:
                key = (field[n[1], n[0]], n[1], n[0])
                if best is None or key < best[0]:
                    best = (key, n)
        if best is None:
            raise NoPath(f"distance field inconsistent at {cur}")
        cur = best[1]
        path.append(cur)
    return path


def shortest_path(grid: OccupancyGrid, start: Cell, goal: Cell) -> list[Cell]:
    passable = _passable_mask(grid)
    field = geodesic_field(passable, [goal])
    return descend(field, passable, start)


def follow(
    grid: OccupancyGrid,
    start: Pose,
    target: Cell,
    delta_max: float = DEFAULT_DELTA_MAX,
    proximity: float = DEFAULT_PROXIMITY,
    field: np.ndarray | None = None,
) -> tuple[Pose, float, bool]:
    """Advance along a shortest Free-cell path toward ``target``.

    Stops as soon as the pose is within ``proximity`` of the target centre
    (``reached``) or the distance covered reaches ``delta_max``. Motion is
    cell-quantised, so a step is skipped if it would overshoot
    ``delta_max`` by more than one cell. ``field`` may carry a precomputed
    cell-unit distance field to ``target`` over the grid's Free cells.
    """
    if not delta_max > 0 or not proximity > 0:
        raise ValueError("delta_max and proximity must be positive")
    res = grid.resolution
    passable = _passable_mask(grid)
    cur = start.cell(res)
    if not grid.is_free(cur) or not grid.in_bounds(target) or not passable[target[1], target[0]]:
        raise NoPath(f"no Free-cell path from {cur} to {target}")
    if field is None:
        field = geodesic_field(passable, [target])
    path = descend(field, passable, cur)
    tx, ty = grid.cell_center(target)
    n_orth = n_diag = 0
    pose = start
    heading = start.theta

    def traveled():
        return res * (n_orth + n_diag * SQRT2)

    i = 0
    while True:
        if math.hypot(tx - pose.x, ty - pose.y) <= proximity + 1e-9:
            if i == 0 and (pose.x, pose.y) != (tx, ty):
                heading = math.atan2(ty - pose.y, tx - pose.x)
            return Pose(pose.x, pose.y, wrap_angle(heading)), traveled(), True
        if traveled() >= delta_max - 1e-9 or i + 1 >= len(path):
            return Pose(pose.x, pose.y, wrap_angle(heading)), traveled(), False
        a, b = path[i], path[i + 1]
        diag = a[0] != b[0] and a[1] != b[1]
        step = res * (SQRT2 if diag else 1.0)
        if traveled() + step > delta_max + res + 1e-9:
            return Pose(pose.x, pose.y, wrap_angle(heading)), traveled(), False
        if diag:
            n_diag += 1
        else:
            n_orth += 1
        heading = math.atan2(b[1] - a[1], b[0] - a[0])
        x, y = grid.cell_center(b)
        pose = Pose(x, y, heading)
        i += 1

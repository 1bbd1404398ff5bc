"""Occupancy-grid sandbox: cells, distance fields, safe space and visibility.

Cells are addressed as ``(x, y)`` with ``x`` the column and ``y`` the row;
``cells[y, x]`` holds the state. Metric positions place cell ``(x, y)`` at
``((x + 0.5) * resolution, (y + 0.5) * resolution)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_RESOLUTION = 0.1
DEFAULT_HFOV = 2.0 * math.pi / 3.0
DEFAULT_RANGE = 1.7
# forward, left, right camera offsets used by genesis keypoint rendering
VIEW_OFFSETS = (0.0, -2.0 * math.pi / 3.0, 2.0 * math.pi / 3.0)

Cell = tuple[int, int]


class CellState(enum.IntEnum):
    FREE = 0
    OBSTACLE = 1
    UNKNOWN = 2


_CHARS = {".": CellState.FREE, "#": CellState.OBSTACLE, "?": CellState.UNKNOWN}
_SYMBOLS = {v: k for k, v in _CHARS.items()}


class GridFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float = 0.0

    def cell(self, resolution: float) -> Cell:
        return int(math.floor(self.x / resolution)), int(math.floor(self.y / resolution))


def wrap_angle(theta: float) -> float:
    """Map an angle into (-pi, pi]."""
    t = math.atan2(math.sin(theta), math.cos(theta))
    return math.pi if t == -math.pi else t


class OccupancyGrid:
    def __init__(self, cells, resolution: float = DEFAULT_RESOLUTION, grid_id: str = ""):
        cells = np.asarray(cells, dtype=np.int8)
        if cells.ndim != 2:
            raise ValueError("cells must be a 2D array")
        h, w = cells.shape
        if w < 2 or h < 2:
            raise ValueError(f"grid must be at least 2x2, got {w}x{h}")
        if not resolution > 0:
            raise ValueError("resolution must be positive")
        if not np.isin(cells, [s.value for s in CellState]).all():
            raise ValueError("cells contain values outside CellState")
        self.cells = cells
        self.resolution = float(resolution)
        self.grid_id = grid_id

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def state(self, cell: Cell) -> CellState:
        return CellState(int(self.cells[cell[1], cell[0]]))

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and self.cells[cell[1], cell[0]] == CellState.FREE

    def free_cells(self) -> list[Cell]:
        ys, xs = np.nonzero(self.cells == CellState.FREE)
        return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))

    def cell_center(self, cell: Cell) -> tuple[float, float]:
        return (cell[0] + 0.5) * self.resolution, (cell[1] + 0.5) * self.resolution

    def pose_at(self, cell: Cell, theta: float = 0.0) -> Pose:
        x, y = self.cell_center(cell)
        return Pose(x, y, theta)

    def cell_index(self, cell: Cell) -> int:
        return cell[1] * self.width + cell[0]

    def copy(self) -> "OccupancyGrid":
        return OccupancyGrid(self.cells.copy(), self.resolution, self.grid_id)

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self.resolution == other.resolution and np.array_equal(self.cells, other.cells)

    def __repr__(self):
        return f"OccupancyGrid({self.width}x{self.height}, res={self.resolution}, id={self.grid_id!r})"

    # text format: "W H RESOLUTION" then H rows of W chars
    def to_text(self) -> str:
        rows = ["".join(_SYMBOLS[CellState(v)] for v in row) for row in self.cells]
        return f"{self.width} {self.height} {self.resolution!r}\n" + "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str, grid_id: str = "") -> "OccupancyGrid":
        lines = [ln.rstrip("\r") for ln in text.splitlines()]
        while lines and not lines[-1].strip():
            lines.pop()
        if not lines:
            raise GridFormatError("empty grid file")
        header = lines[0].split()
        if len(header) != 3:
            raise GridFormatError("header must be 'W H RESOLUTION'")
        try:
            w, h, res = int(header[0]), int(header[1]), float(header[2])
        except ValueError as exc:
            raise GridFormatError(f"bad header: {lines[0]!r}") from exc
        rows = lines[1:]
        if len(rows) != h:
            raise GridFormatError(f"expected {h} rows, found {len(rows)}")
        cells = np.empty((h, w), dtype=np.int8)
        for y, row in enumerate(rows):
            if len(row) != w:
                raise GridFormatError(f"row {y} has {len(row)} cells, expected {w}")
            try:
                cells[y] = [_CHARS[ch] for ch in row]
            except KeyError as exc:
                raise GridFormatError(f"row {y}: unknown cell symbol {exc.args[0]!r}") from None
        try:
            return cls(cells, res, grid_id)
        except ValueError as exc:
            raise GridFormatError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        path = Path(path)
        return cls.from_text(path.read_text(), grid_id=path.stem)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


@dataclass
class DistanceField:
    """Nearest-obstacle distances; ``sq_cells`` is exact, ``meters`` derived."""

    sq_cells: np.ndarray  # int64, -1 where no obstacle exists
    resolution: float

    @property
    def shape(self):
        return self.sq_cells.shape

    @property
    def cells(self) -> np.ndarray:
        sq = self.sq_cells.astype(np.float64)
        return np.where(sq < 0, np.inf, np.sqrt(np.maximum(sq, 0.0)))

    @property
    def meters(self) -> np.ndarray:
        return self.cells * self.resolution

    def at(self, cell: Cell) -> float:
        return float(self.meters[cell[1], cell[0]])


def _column_pass(obstacle: np.ndarray) -> np.ndarray:
    """Squared vertical distance to the nearest obstacle in each column (-1 = none)."""
    h, w = obstacle.shape
    big = h + w + 1
    dist = np.full((h, w), big, dtype=np.int64)
    run = np.full(w, big, dtype=np.int64)
    for y in range(h):
        run = np.where(obstacle[y], 0, np.minimum(run + 1, big))
        dist[y] = run
    run = np.full(w, big, dtype=np.int64)
    for y in range(h - 1, -1, -1):
        run = np.where(obstacle[y], 0, np.minimum(run + 1, big))
        dist[y] = np.minimum(dist[y], run)
    sq = dist * dist
    sq[dist >= big] = -1
    return sq


def _envelope_1d(f: list[int]) -> list[int]:
    """Exact 1D squared EDT: out[q] = min_p f[p] + (q - p)^2 over finite f[p] (>= 0).

    Lower envelope of parabolas; breakpoints are compared with integer
    cross-multiplication so no rounding enters.
    """
    n = len(f)
    sites = [p for p in range(n) if f[p] >= 0]
    if not sites:
        return [-1] * n
    v: list[int] = []
    # breakpoint z_k between parabola v[k-1] and v[k] stored as fraction (num, den), den > 0
    z: list[tuple[int, int]] = []

    def cross(p: int, q: int) -> tuple[int, int]:
        return (f[q] + q * q) - (f[p] + p * p), 2 * (q - p)

    for q in sites:
        while v:
            num, den = cross(v[-1], q)
            if len(v) > 1 and num * z[-1][1] <= z[-1][0] * den:
                v.pop()
                z.pop()
                continue
            break
        if v:
            z.append(cross(v[-1], q))
        v.append(q)
    out = [0] * n
    k = 0
    for q in range(n):
        while k < len(z) and z[k][0] < q * z[k][1]:
            k += 1
        p = v[k]
        out[q] = f[p] + (q - p) * (q - p)
    return out


def compute_distance_field(grid: OccupancyGrid) -> DistanceField:
    """Exact Euclidean distance transform to the nearest Obstacle cell.

    Computed in integer squared cell distances (separable column pass followed
    by a per-row parabola envelope). Unknown cells are not obstacles.
    """
    obstacle = grid.cells == CellState.OBSTACLE
    col = _column_pass(obstacle)
    sq = np.empty_like(col)
    for y in range(grid.height):
        sq[y] = _envelope_1d(col[y].tolist())
    return DistanceField(sq, grid.resolution)


def safe_space(grid: OccupancyGrid, field: DistanceField, delta: float) -> set[Cell]:
    """Free cells whose clearance, in cells, is at least ``delta``."""
    if delta < 0:
        raise ValueError("delta must be >= 0")
    free = grid.cells == CellState.FREE
    sq = field.sq_cells
    if math.isinf(delta):
        ok = sq < 0
    else:
        # sq >= delta^2 exactly for integral delta; float compare otherwise
        ok = (sq < 0) | (sq.astype(np.float64) >= float(delta) * float(delta))
    ys, xs = np.nonzero(free & ok)
    return set(zip(xs.tolist(), ys.tolist()))


def _angle_diff(a, b):
    d = np.mod(a - b + np.pi, 2.0 * np.pi) - np.pi
    return np.abs(d)


def visible_cells(
    grid: OccupancyGrid,
    pose: Pose,
    hfov: float = DEFAULT_HFOV,
    range_m: float = DEFAULT_RANGE,
) -> set[Cell]:
    """Cells in the viewing cone with unobstructed line of sight from ``pose``.

    Each candidate cell is tested with its own ray, sampled at steps of at most
    half a cell; Obstacle and Unknown cells block, and a blocking cell is itself
    visible when nothing nearer blocks it.
    """
    if not 0 < hfov <= 2 * math.pi + 1e-12:
        raise ValueError("hfov must be in (0, 2*pi]")
    if not range_m > 0:
        raise ValueError("range must be positive")
    res = grid.resolution
    px, py = pose.x / res, pose.y / res
    r = range_m / res
    pcx, pcy = int(math.floor(px)), int(math.floor(py))
    x0, x1 = max(0, int(math.floor(px - r)) - 1), min(grid.width - 1, int(math.ceil(px + r)) + 1)
    y0, y1 = max(0, int(math.floor(py - r)) - 1), min(grid.height - 1, int(math.ceil(py + r)) + 1)
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    xs, ys = xs.ravel(), ys.ravel()
    dx = xs + 0.5 - px
    dy = ys + 0.5 - py
    dist = np.sqrt(dx * dx + dy * dy)
    in_range = dist <= r + 1e-9
    if hfov >= 2 * math.pi - 1e-12:
        in_cone = np.ones_like(in_range)
    else:
        ang = np.arctan2(dy, dx)
        in_cone = (_angle_diff(ang, pose.theta) <= hfov / 2 + 1e-9) | (dist < 1e-12)
    own = (xs == pcx) & (ys == pcy)
    cand = (in_range & in_cone) | own
    xs, ys, dx, dy, dist = xs[cand], ys[cand], dx[cand], dy[cand], dist[cand]
    blocking = grid.cells != CellState.FREE
    visible = np.ones(len(xs), dtype=bool)
    steps = np.ceil(dist / 0.5).astype(np.int64)
    max_steps = int(steps.max()) if len(steps) else 0
    for k in range(1, max_steps):
        active = k < steps
        if not active.any():
            break
        frac = k / steps[active]
        sx = np.floor(px + dx[active] * frac).astype(np.int64)
        sy = np.floor(py + dy[active] * frac).astype(np.int64)
        tx, ty = xs[active], ys[active]
        skip = ((sx == tx) & (sy == ty)) | ((sx == pcx) & (sy == pcy))
        inside = (sx >= 0) & (sx < grid.width) & (sy >= 0) & (sy < grid.height)
        hit = np.zeros(len(sx), dtype=bool)
        hit[inside] = blocking[sy[inside], sx[inside]]
        hit &= ~skip
        idx = np.nonzero(active)[0]
        visible[idx[hit]] = False
    out = set(zip(xs[visible].tolist(), ys[visible].tolist()))
    if grid.in_bounds((pcx, pcy)) and grid.cells[pcy, pcx] != CellState.FREE:
        out.discard((pcx, pcy))
    return out


def three_views(grid: OccupancyGrid, pose: Pose, hfov: float = DEFAULT_HFOV, range_m: float = DEFAULT_RANGE):
    """Forward/left/right visible sets at the standard camera offsets."""
    return [visible_cells(grid, Pose(pose.x, pose.y, wrap_angle(pose.theta + z)), hfov, range_m) for z in VIEW_OFFSETS]

"""Independent reference implementations used as test oracles."""

import heapq
import itertools
import math

import numpy as np
import pytest

from sage.gridworld import CellState, OccupancyGrid

SQRT2 = math.sqrt(2.0)


def random_grid(seed, w, h, density=0.2, resolution=0.1, unknown=0.0):
    rng = np.random.default_rng(seed)
    u = rng.random((h, w))
    cells = np.where(u < density, CellState.OBSTACLE, CellState.FREE).astype(np.int8)
    if unknown:
        cells[(u >= density) & (u < density + unknown)] = CellState.UNKNOWN
    return OccupancyGrid(cells, resolution, f"rand-{seed}")


def brute_edt_sq(grid):
    """Squared cell distance to the nearest obstacle by scanning every obstacle (-1 if none)."""
    obs = [(x, y) for y in range(grid.height) for x in range(grid.width) if grid.cells[y, x] == CellState.OBSTACLE]
    out = np.full((grid.height, grid.width), -1, dtype=np.int64)
    if not obs:
        return out
    for y in range(grid.height):
        for x in range(grid.width):
            out[y, x] = min((x - ox) ** 2 + (y - oy) ** 2 for ox, oy in obs)
    return out


def dijkstra_length(passable, start, goal):
    """Plain heap Dijkstra on the 8-connected grid without corner cutting (cell units)."""
    h, w = len(passable), len(passable[0])

    def ok(x, y):
        return 0 <= x < w and 0 <= y < h and passable[y][x]

    dist = {start: 0.0}
    heap = [(0.0, start)]
    done = set()
    while heap:
        d, (x, y) = heapq.heappop(heap)
        if (x, y) in done:
            continue
        if (x, y) == goal:
            return d
        done.add((x, y))
        for dx, dy in itertools.product((-1, 0, 1), repeat=2):
            if (dx, dy) == (0, 0) or not ok(x + dx, y + dy):
                continue
            if dx and dy and not (ok(x + dx, y) and ok(x, y + dy)):
                continue
            nd = d + (SQRT2 if dx and dy else 1.0)
            if nd < dist.get((x + dx, y + dy), math.inf):
                dist[(x + dx, y + dy)] = nd
                heapq.heappush(heap, (nd, (x + dx, y + dy)))
    return None


def los_oracle(grid, pose, hfov, range_m):
    """Scalar per-cell ray test: march each cell's ray in half-cell steps."""
    res = grid.resolution
    px, py = pose.x / res, pose.y / res
    pc = (math.floor(px), math.floor(py))
    r = range_m / res
    out = set()
    for y in range(grid.height):
        for x in range(grid.width):
            dx, dy = x + 0.5 - px, y + 0.5 - py
            dist = math.hypot(dx, dy)
            if (x, y) != pc:
                if dist > r + 1e-9:
                    continue
                if hfov < 2 * math.pi - 1e-12 and dist >= 1e-12:
                    diff = abs((math.atan2(dy, dx) - pose.theta + math.pi) % (2 * math.pi) - math.pi)
                    if diff > hfov / 2 + 1e-9:
                        continue
            n = math.ceil(dist / 0.5)
            blocked = False
            for k in range(1, n):
                sx, sy = math.floor(px + dx * k / n), math.floor(py + dy * k / n)
                if (sx, sy) in ((x, y), pc):
                    continue
                if 0 <= sx < grid.width and 0 <= sy < grid.height and grid.cells[sy, sx] != CellState.FREE:
                    blocked = True
                    break
            if not blocked:
                out.add((x, y))
    if grid.cells[pc[1], pc[0]] != CellState.FREE:
        out.discard(pc)
    return out


@pytest.fixture(scope="session")
def small_dataset():
    """A small genesis run shared by several test modules."""
    from sage.genesis import GenesisConfig, generate_dataset
    from sage.mazes import generate_maze

    grids = [generate_maze(s) for s in range(2)]
    return grids, generate_dataset(grids, GenesisConfig(n_tasks=40, seed=5))


def random_batch(rng, cfg, n_groups=None, w_scale=1.0):
    """Random rollout groups whose ratios sit away from every clip boundary."""
    from sage.evolution.objective import eps_up, group_advantages
    from sage.evolution.policy import RolloutGroup, log_softmax

    d = 8
    w = rng.normal(0, w_scale, d)
    w_ref = w + rng.normal(0, 0.3, d)
    groups = []
    for _ in range(n_groups or int(rng.integers(1, 5))):
        n_cand = int(rng.integers(2, 7))
        phi = rng.normal(0, 1, (n_cand, d))
        mask = int(rng.integers(2))
        while True:
            w_old = w + rng.normal(0, 0.4, d)
            old = log_softmax(phi @ w_old)
            actions = rng.integers(n_cand, size=cfg.group_size)
            rho = np.exp(log_softmax(phi @ w)[actions] - old[actions])
            hi, lo = 1 + float(eps_up(mask, cfg)), 1 - cfg.eps_std
            if np.all(np.abs(rho - hi) > 1e-3) and np.all(np.abs(rho - lo) > 1e-3):
                break
        rewards = rng.normal(0, 1, cfg.group_size)
        groups.append(RolloutGroup(phi, mask, actions, old[actions], rewards, group_advantages(rewards)))
    return w, w_ref, groups

"""Seeded recursive-division mazes rendered as occupancy grids."""

from __future__ import annotations

import numpy as np

from .gridworld import DEFAULT_RESOLUTION, CellState, OccupancyGrid


def recursive_division(rooms_x: int, rooms_y: int, rng: np.random.Generator):
    """Return (h_walls, v_walls) boolean arrays for a rooms_x by rooms_y maze.

    ``h_walls[j, i]`` is the wall below room (i, j); ``v_walls[j, i]`` the wall
    right of room (i, j). Every division keeps exactly one door, so the result
    is a perfect maze.
    """
    h_walls = np.zeros((rooms_y - 1, rooms_x), dtype=bool)
    v_walls = np.zeros((rooms_y, rooms_x - 1), dtype=bool)
    stack = [(0, 0, rooms_x, rooms_y)]
    while stack:
        x, y, w, h = stack.pop()
        if w < 2 and h < 2:
            continue
        if w < 2:
            horizontal = True
        elif h < 2:
            horizontal = False
        elif w == h:
            horizontal = bool(rng.integers(2))
        else:
            horizontal = h > w
        if horizontal:
            cut = y + int(rng.integers(h - 1))
            door = x + int(rng.integers(w))
            h_walls[cut, x : x + w] = True
            h_walls[cut, door] = False
            stack.append((x, y, w, cut - y + 1))
            stack.append((x, cut + 1, w, y + h - cut - 1))
        else:
            cut = x + int(rng.integers(w - 1))
            door = y + int(rng.integers(h))
            v_walls[y : y + h, cut] = True
            v_walls[door, cut] = False
            stack.append((x, y, cut - x + 1, h))
            stack.append((cut + 1, y, x + w - cut - 1, h))
    return h_walls, v_walls


def generate_maze(
    seed: int,
    rooms_x: int = 4,
    rooms_y: int = 4,
    room_cells: int = 20,
    door_cells: int = 12,
    resolution: float = DEFAULT_RESOLUTION,
) -> OccupancyGrid:
    """Maze of ``rooms_x * rooms_y`` square rooms with one-cell walls.

    Doors are ``door_cells`` wide and centred on the shared wall; the defaults
    leave corridors wide enough for a 5-cell clearance band.
    """
    rng = np.random.default_rng(seed)
    h_walls, v_walls = recursive_division(rooms_x, rooms_y, rng)
    pitch = room_cells + 1
    width = rooms_x * pitch + 1
    height = rooms_y * pitch + 1
    cells = np.full((height, width), CellState.FREE, dtype=np.int8)
    cells[0, :] = cells[-1, :] = CellState.OBSTACLE
    cells[:, 0] = cells[:, -1] = CellState.OBSTACLE
    lo = (room_cells - door_cells) // 2
    for j in range(rooms_y):
        for i in range(rooms_x):
            x0, y0 = i * pitch + 1, j * pitch + 1
            if i < rooms_x - 1:
                wx = x0 + room_cells
                cells[y0 - 1 : y0 + room_cells + 1, wx] = CellState.OBSTACLE
                if not v_walls[j, i]:
                    cells[y0 + lo : y0 + lo + door_cells, wx] = CellState.FREE
            if j < rooms_y - 1:
                wy = y0 + room_cells
                cells[wy, x0 - 1 : x0 + room_cells + 1] = CellState.OBSTACLE
                if not h_walls[j, i]:
                    cells[wy, x0 + lo : x0 + lo + door_cells] = CellState.FREE
    # re-close wall junctions opened by door carving on a neighbour's row/column
    for j in range(rooms_y + 1):
        for i in range(rooms_x + 1):
            cells[min(j * pitch, height - 1), min(i * pitch, width - 1)] = CellState.OBSTACLE
    return OccupancyGrid(cells, resolution, grid_id=f"maze-{seed}")


def room_of(cell, room_cells: int = 20) -> tuple[int, int]:
    pitch = room_cells + 1
    return cell[0] // pitch, cell[1] // pitch

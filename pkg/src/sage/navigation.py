"""Frontier/memory navigation loop with experience-augmented candidate selection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .evolution.policy import ReferencePolicy, candidate_features
from .experience import ExperienceStore, RetrievedContext, embed
from .genesis import SceneObject, SyntheticScene, TaskTuple
from .gridworld import (
    DEFAULT_HFOV,
    DEFAULT_RANGE,
    VIEW_OFFSETS,
    Cell,
    CellState,
    OccupancyGrid,
    Pose,
    compute_distance_field,
    visible_cells,
    wrap_angle,
)
from .planner import NoPath, follow, geodesic_field

EXPERIENCE_MODES = ("matched", "mismatched", "none", "random")
OUTCOMES = ("AnsweredFromMemory", "ReachedTarget", "StepBudgetExhausted", "InvalidDecision")
_FOUR = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=bool)


class PoseInObstacle(ValueError):
    pass


class EmptyActionSpace(RuntimeError):
    pass


@dataclass
class NavConfig:
    t_max: int = 50
    delta_max: float = 1.0
    proximity: float = 0.5
    memory_proximity: float = 0.75
    success_radius: float = 1.0
    explored_radius: float = 0.7
    hfov: float = DEFAULT_HFOV
    range_m: float = DEFAULT_RANGE
    initial_views: int = 7
    prefilter: float = 0.1
    retrieval_k: int = 1
    experience: str = "matched"
    max_approach: int = 100

    def __post_init__(self):
        if self.experience not in EXPERIENCE_MODES:
            raise ValueError(f"experience must be one of {EXPERIENCE_MODES}")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


# ------------------------------------------------------------------ buffers


@dataclass(frozen=True)
class FrontierNode:
    cell: Cell
    cluster_size: int
    descriptor: str = ""


@dataclass(frozen=True)
class MemoryEntry:
    label: str
    cell: Cell
    first_seen: int
    descriptor: str
    object_index: int = -1


@dataclass
class MemoryBuffer:
    entries: list[MemoryEntry] = field(default_factory=list)
    _keys: set = field(default_factory=set)

    def add(self, entry: MemoryEntry) -> bool:
        key = (entry.label, entry.cell)
        if key in self._keys:
            return False
        self._keys.add(key)
        self.entries.append(entry)
        return True

    def __len__(self):
        return len(self.entries)

    def keys(self) -> set:
        return set(self._keys)


def frontier_mask(explored: OccupancyGrid) -> np.ndarray:
    """Free cells with at least one 4-neighbour Unknown."""
    unknown = explored.cells == CellState.UNKNOWN
    touch = ndimage.binary_dilation(unknown, structure=_FOUR)
    return (explored.cells == CellState.FREE) & touch


def frontier_clusters(explored: OccupancyGrid, clearance: np.ndarray | None = None) -> list[FrontierNode]:
    """8-connected frontier clusters, each represented by its highest-clearance cell."""
    mask = frontier_mask(explored)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    if clearance is None:
        clearance = compute_distance_field(explored).sq_cells.astype(np.float64)
        clearance[clearance < 0] = np.inf
    ys, xs = np.nonzero(mask)  # row-major: ascending cell index
    lab = labels[ys, xs]
    c = clearance[ys, xs]
    nodes = []
    for k in range(1, n + 1):
        sel = np.nonzero(lab == k)[0]
        best = sel[np.argmax(c[sel])]  # first maximum = lowest index
        nodes.append(FrontierNode((int(xs[best]), int(ys[best])), int(len(sel))))
    nodes.sort(key=lambda f: (f.cell[1], f.cell[0]))
    return nodes


# -------------------------------------------------------------------- state


@dataclass
class NavigationState:
    query: str
    explored: OccupancyGrid
    pose: Pose
    memory: MemoryBuffer = field(default_factory=MemoryBuffer)
    frontiers: list[FrontierNode] = field(default_factory=list)
    step: int = 0
    path_length: float = 0.0
    geo: np.ndarray | None = None  # cell-unit geodesic distances from the pose over explored Free cells

    @classmethod
    def start(cls, query: str, true_grid: OccupancyGrid, pose: Pose) -> "NavigationState":
        blank = np.full(true_grid.cells.shape, CellState.UNKNOWN, dtype=np.int8)
        return cls(query, OccupancyGrid(blank, true_grid.resolution, true_grid.grid_id), pose)


def panorama(pose: Pose, n_views: int) -> list[float]:
    if n_views == 3:
        return [wrap_angle(pose.theta + z) for z in VIEW_OFFSETS]
    return [wrap_angle(pose.theta + 2.0 * math.pi * i / n_views) for i in range(n_views)]


def perceive(state: NavigationState, true_grid: OccupancyGrid, scene: SyntheticScene, cfg: NavConfig) -> list[int]:
    """Reveal the views around the pose and refresh both buffers; returns newly remembered object indices."""
    res = true_grid.resolution
    cell = state.pose.cell(res)
    if not true_grid.in_bounds(cell) or not true_grid.is_free(cell):
        raise PoseInObstacle(f"pose cell {cell} is not Free")
    n_views = cfg.initial_views if state.step == 0 else 3
    seen: set[Cell] = set()
    for h in panorama(state.pose, n_views):
        seen |= visible_cells(true_grid, Pose(state.pose.x, state.pose.y, h), cfg.hfov, cfg.range_m)
    r = cfg.explored_radius / res
    ri = int(math.ceil(r))
    for dy in range(-ri, ri + 1):
        for dx in range(-ri, ri + 1):
            c = (cell[0] + dx, cell[1] + dy)
            if dx * dx + dy * dy <= r * r + 1e-9 and true_grid.in_bounds(c):
                seen.add(c)
    if seen:
        xs = np.fromiter((c[0] for c in seen), dtype=np.int64, count=len(seen))
        ys = np.fromiter((c[1] for c in seen), dtype=np.int64, count=len(seen))
        state.explored.cells[ys, xs] = true_grid.cells[ys, xs]
    new = []
    for i, o in enumerate(scene.objects):
        if tuple(o.cell) in seen and state.memory.add(MemoryEntry(o.label, tuple(o.cell), state.step, o.label, i)):
            new.append(i)
    passable = state.explored.cells == CellState.FREE
    state.geo = geodesic_field(passable, [cell])
    state.frontiers = [f for f in frontier_clusters(state.explored) if np.isfinite(state.geo[f.cell[1], f.cell[0]])]
    return new


# ------------------------------------------------------------------ actions


@dataclass(frozen=True)
class Action:
    kind: str  # "frontier" | "memory"
    index: int
    cell: Cell
    label: str = ""


@dataclass
class Candidates:
    actions: list[Action]
    features: np.ndarray
    retrieved: RetrievedContext


def retrieve(store: ExperienceStore | None, query: str, scene_text: str, cfg: NavConfig, rng: np.random.Generator) -> RetrievedContext:
    k = cfg.retrieval_k
    if store is None or not len(store) or cfg.experience == "none":
        return RetrievedContext([], k)
    if cfg.experience == "matched":
        return store.retrieve(query, scene_text, k)
    if cfg.experience == "mismatched":
        return store.retrieve_mismatched(query, scene_text, k)
    return store.retrieve_random(rng, query, scene_text, k)


def _cos(a: str, b: str) -> float:
    if not a.strip() or not b.strip():
        return 0.0
    return float(embed(a) @ embed(b))


def prefilter_memory(state: NavigationState, threshold: float) -> list[int]:
    """Memory entries whose descriptor is similar enough to the query."""
    return [i for i, e in enumerate(state.memory.entries) if _cos(state.query, e.descriptor) > threshold]


def build_candidates(state: NavigationState, retrieved: RetrievedContext, cfg: NavConfig) -> Candidates:
    res = state.explored.resolution
    geo = state.geo
    actions, feats = [], []
    query = state.query

    def bearing_cos(cell):
        cx, cy = state.explored.cell_center(cell)
        if (cx, cy) == (state.pose.x, state.pose.y):
            return 0.0
        return math.cos(state.pose.theta - math.atan2(cy - state.pose.y, cx - state.pose.x))

    for i, f in enumerate(state.frontiers):
        d = geo[f.cell[1], f.cell[0]] * res
        actions.append(Action("frontier", i, f.cell))
        feats.append(candidate_features((), query, retrieved, d, bearing_cos(f.cell), min(f.cluster_size / 30.0, 1.0), False))
    for i in prefilter_memory(state, cfg.prefilter):
        e = state.memory.entries[i]
        d = geo[e.cell[1], e.cell[0]]
        if not np.isfinite(d):
            continue  # seen but not yet reachable through explored space
        actions.append(Action("memory", i, e.cell, e.label))
        feats.append(candidate_features((e.label,), query, retrieved, d * res, bearing_cos(e.cell), 0.0, True))
    f = np.array(feats) if feats else np.zeros((0, 8))
    return Candidates(actions, f, retrieved)


class NavPolicy(Protocol):
    def scores(self, state: NavigationState, cands: Candidates) -> np.ndarray: ...


class LinearNavPolicy:
    """Scores candidates with a reference policy's weights."""

    def __init__(self, policy: ReferencePolicy):
        self.policy = policy

    def scores(self, state, cands):
        return cands.features @ self.policy.w


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def scores(self, state, cands):
        return self.rng.random(len(cands.actions))


class FirstFrontierPolicy:
    def scores(self, state, cands):
        s = np.zeros(len(cands.actions))
        if len(s):
            s[0] = 1.0
        return s


class OraclePolicy:
    """Goes for a remembered target at once, otherwise the frontier geodesically closest to one."""

    def __init__(self, true_grid: OccupancyGrid, targets: Sequence[Cell]):
        passable = true_grid.cells == CellState.FREE
        self.field = geodesic_field(passable, list(targets))
        self.targets = set(targets)

    def scores(self, state, cands):
        out = np.empty(len(cands.actions))
        for i, a in enumerate(cands.actions):
            x, y = a.cell
            if a.kind == "memory":
                # any remembered target beats every frontier; the nearest one first
                out[i] = 1e12 - state.geo[y, x] if a.cell in self.targets else -np.inf
            else:
                out[i] = -(state.geo[y, x] + self.field[y, x])
        return out


def select_action(policy: NavPolicy, state: NavigationState, cands: Candidates) -> Action:
    """Argmax of the policy's scores; candidates are ordered frontiers first, so ties go to the lowest frontier."""
    if not cands.actions:
        raise EmptyActionSpace("no frontier or memory candidate")
    s = np.asarray(policy.scores(state, cands), dtype=np.float64)
    return cands.actions[int(np.argmax(s))]


# ------------------------------------------------------------------ episode


@dataclass
class Episode:
    episode_id: str
    query: str
    kind: str  # "goal" | "qa"
    category: str
    target_label: str
    truth: str
    grid_id: str
    start: Pose


@dataclass
class StepRecord:
    t: int
    pose: tuple[float, float, float]
    action_kind: str
    action_target: list[int]
    retrieved: list[str]
    traveled: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "pose": list(self.pose),
            "action_kind": self.action_kind,
            "action_target": self.action_target,
            "retrieved": self.retrieved,
            "traveled": self.traveled,
        }


@dataclass
class EpisodeResult:
    episode_id: str
    outcome: str
    answer: str | None
    steps: int
    path_length: float
    shortest: float
    success: bool
    kind: str = "goal"
    category: str = ""
    truth: str = ""
    judge_raw: int | None = None
    error: str = ""
    trace: list[StepRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "outcome": self.outcome,
            "answer": self.answer,
            "steps": self.steps,
            "path_length": self.path_length,
            "shortest": self.shortest,
            "success": self.success,
            "kind": self.kind,
            "category": self.category,
            "truth": self.truth,
            "judge_raw": self.judge_raw,
            "error": self.error,
            "trace": [r.to_dict() for r in self.trace],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def target_cells(scene: SyntheticScene, label: str) -> list[Cell]:
    return sorted({tuple(o.cell) for o in scene.objects if o.label == label}, key=lambda c: (c[1], c[0]))


def success_region(true_grid: OccupancyGrid, targets: Sequence[Cell], radius: float) -> list[Cell]:
    """Free cells whose centre lies within ``radius`` of some target centre."""
    res = true_grid.resolution
    out = set()
    r = radius / res
    ri = int(math.floor(r))
    for tx, ty in targets:
        for dy in range(-ri, ri + 1):
            for dx in range(-ri, ri + 1):
                c = (tx + dx, ty + dy)
                if dx * dx + dy * dy <= r * r + 1e-9 and true_grid.in_bounds(c) and true_grid.is_free(c):
                    out.add(c)
    return sorted(out, key=lambda c: (c[1], c[0]))


def shortest_to_region(true_grid: OccupancyGrid, start: Cell, region: Sequence[Cell]) -> float:
    passable = true_grid.cells == CellState.FREE
    field = geodesic_field(passable, list(region), resolution=true_grid.resolution)
    return float(field[start[1], start[0]])


def within(pose: Pose, grid: OccupancyGrid, targets: Sequence[Cell], radius: float) -> bool:
    return any(math.hypot(pose.x - grid.cell_center(t)[0], pose.y - grid.cell_center(t)[1]) <= radius + 1e-9 for t in targets)


_CATEGORY_ANSWERS = {
    "AttributeRecognition": lambda o: f"The {o.label} is {o.attributes.get('color', 'unknown')}.",
    "ObjectStateRecognition": lambda o: f"Yes, the {o.label} is {o.attributes.get('state', 'present')}.",
    "WorldKnowledge": lambda o: f"A {o.label}.",
    "FunctionalReasoning": lambda o: f"Go to the {o.label}.",
    "ObjectLocalization": lambda o: f"In the {o.attributes.get('room', 'room')}.",
}


def reference_answerer(entry: MemoryEntry, scene: SyntheticScene, category: str) -> str:
    """Answer from the stored label or attribute of the chosen memory entry."""
    obj: SceneObject = scene.objects[entry.object_index] if entry.object_index >= 0 else SceneObject(entry.label, entry.cell)
    fn = _CATEGORY_ANSWERS.get(category)
    return fn(obj) if fn else obj.label


def run_episode(
    episode: Episode,
    true_grid: OccupancyGrid,
    scene: SyntheticScene,
    policy: NavPolicy,
    store: ExperienceStore | None,
    cfg: NavConfig,
    seed: int = 0,
    answerer: Callable = reference_answerer,
) -> EpisodeResult:
    res = true_grid.resolution
    targets = target_cells(scene, episode.target_label)
    region = success_region(true_grid, targets, cfg.success_radius)
    start_cell = episode.start.cell(res)
    l = shortest_to_region(true_grid, start_cell, region) if region else math.inf
    l = max(l, res)  # start inside the region: count one cell so SPL stays defined
    rng = np.random.default_rng(seed)
    state = NavigationState.start(episode.query, true_grid, episode.start)
    trace: list[StepRecord] = []
    result = EpisodeResult(episode.episode_id, "StepBudgetExhausted", None, 0, 0.0, l, False, episode.kind, episode.category, episode.truth)

    def finish(outcome, answer=None, error=""):
        result.outcome, result.answer, result.error = outcome, answer, error
        result.steps, result.path_length, result.trace = state.step, state.path_length, trace
        if episode.kind == "goal":
            result.success = outcome == "ReachedTarget" and within(state.pose, true_grid, targets, cfg.success_radius)
        else:
            result.success = outcome == "AnsweredFromMemory"
        return result

    try:
        while state.step < cfg.t_max:
            perceive(state, true_grid, scene, cfg)
            seen = " ".join(e.label for e in state.memory.entries[-8:])
            retrieved = retrieve(store, episode.query, seen, cfg, rng)
            cands = build_candidates(state, retrieved, cfg)
            try:
                action = select_action(policy, state, cands)
            except EmptyActionSpace as exc:
                return finish("InvalidDecision", error=str(exc))
            pose0 = state.pose
            if action.kind == "frontier":
                new_pose, traveled, _ = follow(state.explored, state.pose, action.cell, cfg.delta_max, cfg.proximity)
                state.pose = new_pose
                state.path_length += traveled
                trace.append(StepRecord(state.step, (pose0.x, pose0.y, pose0.theta), "frontier", list(action.cell), retrieved.ids, traveled))
                state.step += 1
                continue
            entry = state.memory.entries[action.index]
            total = 0.0
            reached = False
            for _ in range(cfg.max_approach):
                new_pose, traveled, reached = follow(state.explored, state.pose, entry.cell, cfg.delta_max, cfg.memory_proximity)
                state.pose = new_pose
                total += traveled
                if reached or traveled == 0:
                    break
            state.path_length += total
            trace.append(StepRecord(state.step, (pose0.x, pose0.y, pose0.theta), "memory", list(entry.cell), retrieved.ids, total))
            state.step += 1
            if episode.kind == "qa":
                return finish("AnsweredFromMemory", answerer(entry, scene, episode.category))
            return finish("ReachedTarget", entry.label)
        return finish("StepBudgetExhausted")
    except (NoPath, PoseInObstacle, ValueError) as exc:
        return finish("InvalidDecision", error=f"{type(exc).__name__}: {exc}")


def episode_from_task(task: TaskTuple, resolution: float, kind: str = "goal", episode_id: str | None = None) -> Episode:
    """Start at the trajectory start; goal episodes ask for the task's target object."""
    first = task.observations[0]
    start = Pose((first["cell"][0] + 0.5) * resolution, (first["cell"][1] + 0.5) * resolution, first["heading"])
    query = f"Find the {task.target_label}." if kind == "goal" else task.instruction
    truth = task.target_label if kind == "goal" else task.ground_truth.answer_text
    return Episode(
        episode_id or task.task_id,
        query,
        kind,
        task.category,
        task.target_label,
        truth,
        task.provenance.get("grid_id", task.trajectory_id.rsplit("-t", 1)[0]),
        start,
    )

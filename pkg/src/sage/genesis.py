"""Sandbox task and experience-rule synthesis with template verification."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .experience import RULE_PATTERN, ExperienceRule, rule_text
from .gridworld import Cell, OccupancyGrid
from .planner import ObservationTriplet, ObservationView

log = logging.getLogger(__name__)

CATEGORIES = (
    "ObjectRecognition",
    "ObjectLocalization",
    "AttributeRecognition",
    "ObjectStateRecognition",
    "Counting",
    "WorldKnowledge",
    "SpatialUnderstanding",
    "FunctionalReasoning",
)
RELATIONS = ("left_of", "right_of", "near", "above", "below", "in_room")
DEFAULT_WALL_LABELS = frozenset({"wall", "ceiling", "floor"})

# label -> (color, material, size, state, room, use)
CATALOG: dict[str, tuple[str, str, str, str, str, str]] = {
    "piano": ("black", "wooden", "large", "closed", "living room", "play some music"),
    "sofa": ("grey", "fabric", "large", "empty", "living room", "take a nap"),
    "lamp": ("white", "metal", "small", "switched on", "bedroom", "read at night"),
    "television": ("black", "plastic", "large", "switched off", "living room", "watch the news"),
    "fridge": ("silver", "steel", "tall", "closed", "kitchen", "keep food cold"),
    "stove": ("white", "steel", "medium", "switched off", "kitchen", "cook dinner"),
    "sink": ("white", "ceramic", "medium", "dry", "bathroom", "wash my hands"),
    "bed": ("blue", "fabric", "large", "made", "bedroom", "sleep"),
    "bookshelf": ("brown", "wooden", "tall", "full", "study", "find a novel"),
    "plant": ("green", "leafy", "small", "watered", "hallway", "add some greenery"),
    "chair": ("red", "wooden", "small", "empty", "dining room", "sit down"),
    "table": ("brown", "wooden", "medium", "clear", "dining room", "eat lunch"),
    "toilet": ("white", "ceramic", "medium", "clean", "bathroom", "use the restroom"),
    "wardrobe": ("brown", "wooden", "tall", "open", "bedroom", "hang a coat"),
    "clock": ("gold", "metal", "small", "ticking", "hallway", "check the time"),
    "wall": ("beige", "plaster", "large", "intact", "hallway", "hang a picture"),
}
DEFAULT_LABELS = tuple(CATALOG)
_NUMBERS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten")

TASK_PATTERN = re.compile(
    r"^Task: (?P<category>" + "|".join(CATEGORIES) + r") \| Question: (?P<question>[^|\n]+\?) \| Answer: (?P<answer>[^|\n]+)$"
)


@dataclass(frozen=True)
class RelationThresholds:
    lateral_cells: int = 2
    near_cells: float = 5.0
    room_cells: int = 20


@dataclass(frozen=True)
class SceneObject:
    label: str
    cell: Cell
    attributes: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass
class SyntheticScene:
    grid_id: str
    objects: list[SceneObject]
    scene_graph: list[tuple[int, str, int]]  # (subject index, relation, object index)

    def relations_of(self, i: int) -> list[tuple[str, int]]:
        return [(r, o) for s, r, o in self.scene_graph if s == i]

    def to_dict(self) -> dict:
        return {
            "grid_id": self.grid_id,
            "objects": [{"label": o.label, "cell": list(o.cell), "attributes": o.attributes} for o in self.objects],
            "scene_graph": [list(t) for t in self.scene_graph],
        }


class NotEnoughFreeCells(ValueError):
    pass


def relations_between(a: Cell, b: Cell, th: RelationThresholds = RelationThresholds()) -> list[str]:
    """Relations (a REL b) implied by cell geometry; y grows downward."""
    dx, dy = a[0] - b[0], a[1] - b[1]
    out = []
    if dx < -th.lateral_cells:
        out.append("left_of")
    if dx > th.lateral_cells:
        out.append("right_of")
    if math.hypot(dx, dy) <= th.near_cells:
        out.append("near")
    if dy < -th.lateral_cells:
        out.append("above")
    if dy > th.lateral_cells:
        out.append("below")
    p = th.room_cells + 1
    if (a[0] // p, a[1] // p) == (b[0] // p, b[1] // p):
        out.append("in_room")
    return out


def build_scene_graph(objects: Sequence[SceneObject], th: RelationThresholds = RelationThresholds()):
    triples = []
    for i, a in enumerate(objects):
        for j, b in enumerate(objects):
            if i != j:
                triples.extend((i, r, j) for r in relations_between(a.cell, b.cell, th))
    return triples


def attributes_for(label: str) -> dict:
    color, material, size, state, room, use = CATALOG.get(label, ("plain", "unknown", "medium", "present", "room", "look at it"))
    return {"color": color, "material": material, "size": size, "state": state, "room": room, "use": use}


def place_objects(
    grid: OccupancyGrid,
    catalog: Sequence[str],
    density: float,
    rng_seed,
    thresholds: RelationThresholds = RelationThresholds(),
) -> SyntheticScene:
    """Put ceil(density * |Free|) labelled objects on distinct Free cells."""
    if not 0 < density <= 0.2:
        raise ValueError("density must be in (0, 0.2]")
    if not catalog:
        raise ValueError("catalog must be nonempty")
    free = grid.free_cells()
    n = math.ceil(density * len(free))
    if n > len(free):
        raise NotEnoughFreeCells(f"need {n} free cells, have {len(free)}")
    rng = np.random.default_rng(rng_seed)
    picks = rng.choice(len(free), size=n, replace=False)
    labels = rng.integers(len(catalog), size=n)
    objects = [SceneObject(catalog[int(l)], free[int(p)], attributes_for(catalog[int(l)])) for p, l in zip(picks, labels)]
    return SyntheticScene(grid.grid_id, objects, build_scene_graph(objects, thresholds))


# ------------------------------------------------------------ synthesizers


class Refuse(Exception):
    """Raised by a synthesizer that cannot produce output for its inputs."""


class TaskSynthesizer(Protocol):
    def question(
        self,
        view: ObservationView,
        objects: Sequence[SceneObject],
        triples: Sequence[tuple[int, str, int]],
        category: str,
        seed: int,
    ) -> tuple[str, str]: ...

    def rule(self, task_text: str, view: ObservationView, objects: Sequence[SceneObject], final: bool) -> str: ...


def count_word(n: int) -> str:
    return _NUMBERS[n] if 0 <= n < len(_NUMBERS) else str(n)


def _plural(label: str) -> str:
    return label + ("es" if label.endswith(("s", "sh", "ch")) else "s")


_REL_WORDS = {"left_of": "to the left of", "right_of": "to the right of", "above": "above", "below": "below", "near": "near"}


class TemplateSynthesizer:
    """Deterministic question/answer and rule templates, one per category."""

    def __init__(self, wall_labels=DEFAULT_WALL_LABELS, multiple_choice: float = 0.0):
        self.wall_labels = frozenset(wall_labels)
        self.multiple_choice = multiple_choice

    def _targets(self, view, objects):
        return [i for i in view.objects if objects[i].label not in self.wall_labels]

    def question(self, view, objects, triples, category, seed):
        rng = np.random.default_rng(seed)
        idx = self._targets(view, objects)
        if not idx:
            raise Refuse("no identifiable target in view")
        t = idx[int(rng.integers(len(idx)))]
        obj = objects[t]
        a = obj.attributes or attributes_for(obj.label)
        others = [i for i in idx if objects[i].label != obj.label]
        anchor = objects[others[int(rng.integers(len(others)))]].label if others else None
        visible = set(view.objects)
        if category == "ObjectRecognition":
            near = f"the {anchor}" if anchor else "the end of the path"
            return f"What is the {a['size']} {a['color']} object near {near}?", obj.label
        if category == "ObjectLocalization":
            rels = [(r, o) for s, r, o in triples if s == t and o in visible and r in _REL_WORDS and objects[o].label != obj.label]
            if rels:
                r, o = rels[int(rng.integers(len(rels)))]
                return f"Where is the {obj.label} located?", f"{_REL_WORDS[r].capitalize()} the {objects[o].label}."
            return f"Where is the {obj.label} located?", f"In the {a['room']}."
        if category == "AttributeRecognition":
            return f"What color is the {obj.label}?", f"The {obj.label} is {a['color']}."
        if category == "ObjectStateRecognition":
            return f"Is the {obj.label} {a['state']}?", f"Yes, the {obj.label} is {a['state']}."
        if category == "Counting":
            labels = [objects[i].label for i in idx]
            label = max(sorted(set(labels)), key=labels.count)
            n = labels.count(label)
            return f"How many {_plural(label)} are visible here?", f"{count_word(n).capitalize()}."
        if category == "WorldKnowledge":
            return f"What {a['material']} item usually found in a {a['room']} is visible here?", f"A {obj.label}."
        if category == "SpatialUnderstanding":
            rels = [
                (r, o)
                for s, r, o in triples
                if s == t and o in visible and r in ("left_of", "right_of", "above", "below") and objects[o].label != obj.label
            ]
            if not rels:
                raise Refuse("no directional relation between visible objects")
            r, o = rels[int(rng.integers(len(rels)))]
            other = objects[o].label
            return (
                f"What is the relative position of the {obj.label} and the {other}?",
                f"The {obj.label} is {_REL_WORDS[r]} the {other}.",
            )
        if category == "FunctionalReasoning":
            return f"I want to {a['use']}, where should I go?", f"Go to the {obj.label}."
        raise Refuse(f"unknown category {category!r}")

    def rule(self, task_text, view, objects, final):
        scene = ", ".join(objects[i].label for i in view.objects) or "an open path"
        return rule_text(task_text, scene, "answering" if final else "searching")


# ------------------------------------------------------------------ tasks


@dataclass
class GroundTruth:
    answer_text: str
    forward_observation: int  # keypoint index whose forward view holds the answer
    options: list[str] | None = None  # multiple choice; answer_text is among them


@dataclass
class TaskTuple:
    task_id: str
    instruction: str
    category: str
    trajectory_id: str
    ground_truth: GroundTruth
    knowledge: list[str] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    observations: list[dict] = field(default_factory=list)
    target_label: str = ""

    def render(self) -> str:
        return f"Task: {self.category} | Question: {self.instruction} | Answer: {self.ground_truth.answer_text}"

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskTuple":
        d = dict(d)
        d["ground_truth"] = GroundTruth(**d["ground_truth"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class Rejected:
    reason: str


def _describe_view(t: ObservationTriplet, which: int, view: ObservationView, grid: OccupancyGrid) -> dict:
    return {
        "keypoint": t.step,
        "view": which,
        "cell": list(t.pose.cell(grid.resolution)),
        "heading": view.heading,
        "labels": list(view.labels),
        "n_visible": len(view.cells),
    }


def endpoint_rejection(view: ObservationView, objects, wall_labels=DEFAULT_WALL_LABELS) -> str | None:
    if not view.objects:
        return "NoVisibleTarget"
    if all(objects[i].label in wall_labels for i in view.objects):
        return "WallTarget"
    return None


def synthesize_task(
    scene: SyntheticScene,
    triplets: Sequence[ObservationTriplet],
    synth: TaskSynthesizer,
    rng_seed,
    grid: OccupancyGrid | None = None,
    trajectory_id: str = "",
    wall_labels=DEFAULT_WALL_LABELS,
    multiple_choice: float = 0.0,
) -> TaskTuple | Rejected:
    """Build a task from the forward view at the trajectory endpoint."""
    if not triplets:
        raise ValueError("triplets must be nonempty")
    rng = np.random.default_rng(rng_seed)
    category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
    synth_seed = int(rng.integers(2**31))
    end = triplets[-1]
    reason = endpoint_rejection(end.forward, scene.objects, wall_labels)
    if reason:
        return Rejected(reason)
    try:
        question, answer = synth.question(end.forward, scene.objects, scene.scene_graph, category, synth_seed)
    except Refuse:
        return Rejected("SynthesizerRefused")
    options = None
    if multiple_choice and rng.random() < multiple_choice:
        pool = sorted({o.label for o in scene.objects} - {answer} - set(wall_labels))
        distract = [f"A {l}." for l in pool]
        if len(distract) >= 3:
            chosen = [distract[int(i)] for i in rng.choice(len(distract), size=3, replace=False)]
            options = chosen + [answer]
            rng.shuffle(options)
    visible_labels = [scene.objects[i].label for i in end.forward.objects if scene.objects[i].label not in wall_labels]
    target = next((l for l in visible_labels if l.lower() in (question + " " + answer).lower()), visible_labels[0])
    obs = []
    if grid is not None:
        for t in triplets:
            for w, v in enumerate(t.views):
                obs.append(_describe_view(t, w, v, grid))
    return TaskTuple(
        task_id=f"{trajectory_id}-task",
        instruction=question,
        category=category,
        trajectory_id=trajectory_id,
        ground_truth=GroundTruth(answer, end.step, options),
        observations=obs,
        target_label=target,
    )


def synthesize_rules(
    triplets: Sequence[ObservationTriplet],
    task: TaskTuple,
    synth: TaskSynthesizer,
    scene: SyntheticScene,
) -> list[ExperienceRule]:
    """One IF-AND-THEN rule per keypoint from its forward view."""
    rules = []
    last = len(triplets) - 1
    for t in triplets:
        try:
            text = synth.rule(task.instruction, t.forward, scene.objects, t.step == last)
        except Refuse as exc:
            log.info("rule for keypoint %d skipped: %s", t.step, exc)
            continue
        m = RULE_PATTERN.match(text)
        task_text = m.group("task") if m else task.instruction
        scene_text = m.group("scene") if m else ""
        rules.append(ExperienceRule(f"{task.trajectory_id}-k{t.step}", task_text, scene_text, text, None, task.trajectory_id))
    task.knowledge = [r.id for r in rules]
    return rules


@dataclass
class Verdict:
    accepted: bool
    reason: str | None = None


def verify(
    task: TaskTuple,
    rules: Sequence[ExperienceRule],
    endpoint_view: ObservationView | None = None,
    objects: Sequence[SceneObject] = (),
    wall_labels=DEFAULT_WALL_LABELS,
) -> Verdict:
    """Staged rejection: endpoint content, task template, then rule templates."""
    if endpoint_view is not None:
        reason = endpoint_rejection(endpoint_view, objects, wall_labels)
        if reason:
            return Verdict(False, reason)
    if not TASK_PATTERN.match(task.render()):
        return Verdict(False, "TaskTemplateViolation")
    if task.ground_truth.options is not None:
        opts = task.ground_truth.options
        if len(opts) != 4 or opts.count(task.ground_truth.answer_text) != 1:
            return Verdict(False, "TaskTemplateViolation")
    for r in rules:
        if not RULE_PATTERN.match(r.full_text):
            return Verdict(False, "RuleTemplateViolation")
    return Verdict(True)


# --------------------------------------------------------------- pipeline

ENDPOINT_REASONS = ("NotFound", "TooLong")
TASK_REASONS = ("NoVisibleTarget", "WallTarget", "SynthesizerRefused", "TaskTemplateViolation", "RuleTemplateViolation")


@dataclass
class GenesisConfig:
    n_tasks: int = 100
    seed: int = 0
    density: float = 0.01
    delta_cells: float = 5.0
    max_length: float = 20.0
    multiple_choice: float = 0.0
    max_attempts_factor: int = 20
    catalog: tuple = DEFAULT_LABELS
    wall_labels: tuple = tuple(sorted(DEFAULT_WALL_LABELS))


@dataclass
class GenesisResult:
    tasks: list[TaskTuple]
    rules: list[ExperienceRule]
    trajectories: list  # planner.Trajectory
    scenes: dict[str, SyntheticScene]
    attempted: int = 0
    rejections: dict[str, int] = field(default_factory=dict)

    @property
    def accepted(self) -> int:
        return len(self.tasks)

    def statistics(self) -> dict:
        return {
            "attempted": self.attempted,
            "accepted": self.accepted,
            "rejected": sum(self.rejections.values()),
            "by_reason": dict(sorted(self.rejections.items())),
        }


def generate_dataset(grids: Sequence[OccupancyGrid], cfg: GenesisConfig, synth: TaskSynthesizer | None = None) -> GenesisResult:
    """Sample, synthesize and verify until ``n_tasks`` are accepted or attempts run out.

    Attempt ``i`` runs on grid ``i mod len(grids)`` with stage seeds derived
    from ``(seed, i)``, so output depends only on the inputs and config.
    """
    from .gridworld import compute_distance_field, safe_space
    from .planner import EmptySafeSpace, discretize, sample_task_endpoints

    if cfg.n_tasks < 0:
        raise ValueError("n_tasks must be >= 0")
    if not grids and cfg.n_tasks:
        raise ValueError("need at least one grid")
    synth = synth or TemplateSynthesizer(cfg.wall_labels)
    wall = frozenset(cfg.wall_labels)
    prepared = []
    scenes = {}
    for gi, grid in enumerate(grids):
        safe = safe_space(grid, compute_distance_field(grid), cfg.delta_cells)
        scene = place_objects(grid, list(cfg.catalog), cfg.density, [cfg.seed, gi, 0])
        scenes[grid.grid_id] = scene
        prepared.append((grid, safe, scene))
    res = GenesisResult([], [], [], scenes)
    reasons = dict.fromkeys(ENDPOINT_REASONS + TASK_REASONS, 0)
    limit = cfg.max_attempts_factor * cfg.n_tasks
    attempt = 0
    while res.accepted < cfg.n_tasks and attempt < limit:
        grid, safe, scene = prepared[attempt % len(prepared)]
        s_end, s_key, s_task = (int(s) for s in np.random.SeedSequence([cfg.seed, attempt]).generate_state(3))
        attempt += 1
        if not safe:
            raise EmptySafeSpace(f"grid {grid.grid_id} has no safe cells")
        sample = sample_task_endpoints(grid, safe, s_end, cfg.max_length)
        if not sample.accepted:
            reasons[sample.reason] += 1
            continue
        traj = sample.trajectory
        traj_id = f"{grid.grid_id}-t{attempt - 1:05d}"
        traj.traj_id, traj.scene = traj_id, grid.grid_id
        if len(traj.waypoints) < 2:
            reasons["NotFound"] += 1
            continue
        triplets = discretize(traj, s_key, grid, scene.objects)
        task = synthesize_task(scene, triplets, synth, s_task, grid, traj_id, wall, cfg.multiple_choice)
        if isinstance(task, Rejected):
            reasons[task.reason] += 1
            continue
        rules = synthesize_rules(triplets, task, synth, scene)
        verdict = verify(task, rules, triplets[-1].forward, scene.objects, wall)
        if not verdict.accepted:
            reasons[verdict.reason] += 1
            continue
        task.provenance = {"grid_id": grid.grid_id, "master_seed": cfg.seed, "stage_seeds": [s_end, s_key, s_task]}
        res.tasks.append(task)
        res.rules.extend(rules)
        res.trajectories.append(traj)
    res.attempted = attempt
    res.rejections = reasons
    return res


def load_tasks(path) -> list[TaskTuple]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(TaskTuple.from_dict(json.loads(line)))
    return out


def save_tasks(path, tasks: Sequence[TaskTuple]) -> None:
    with open(path, "w") as fh:
        for t in tasks:
            fh.write(t.to_json() + "\n")


def scene_from_dict(d: dict) -> SyntheticScene:
    objs = [SceneObject(o["label"], tuple(o["cell"]), o.get("attributes", {})) for o in d["objects"]]
    return SyntheticScene(d["grid_id"], objs, [tuple(t) for t in d["scene_graph"]])

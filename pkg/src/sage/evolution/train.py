"""Hybrid experience-augmented group training of the reference policy."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..experience import ExperienceStore, RetrievedContext
from ..genesis import TaskTuple
from .objective import EvolutionConfig, eta_schedule, group_advantages, reward
from .policy import ReferencePolicy, RolloutGroup, candidate_features, policy_update

TRACE_COLUMNS = ("step", "eta", "r_val", "mean_reward", "mean_kl", "clip_frac_exp", "clip_frac_std", "grad_norm")
EMPTY_EXPERIENCE = "[no experience]"
VALIDATION_SEED = 7919


class GroundTruthMissing(ValueError):
    pass


def query_text(task: TaskTuple) -> str:
    return "answering " + task.instruction


@dataclass
class PreparedTask:
    """A task with its retrieved experience and per-observation features cached."""

    task: TaskTuple
    gt: int  # index into task.observations
    retrieved: RetrievedContext
    plain: np.ndarray  # (n_obs, d) without experience
    augmented: np.ndarray  # (n_obs, d) with experience


def _gt_index(task: TaskTuple) -> int:
    want = task.ground_truth.forward_observation
    for i, o in enumerate(task.observations):
        if o["keypoint"] == want and o["view"] == 0:
            return i
    raise GroundTruthMissing(f"task {task.task_id} has no forward view at keypoint {want}")


def prepare_task(task: TaskTuple, store: ExperienceStore | None, k: int = 1, resolution: float = 0.1) -> PreparedTask:
    gt = _gt_index(task)
    obs = task.observations
    end = obs[gt]
    ex, ey = end["cell"]
    query = query_text(task)
    retrieved = store.retrieve(query, "", k) if store is not None and len(store) else RetrievedContext([], k)
    plain, aug = [], []
    for o in obs:
        dx, dy = ex - o["cell"][0], ey - o["cell"][1]
        dist = math.hypot(dx, dy) * resolution
        # alignment with the bearing to the goal; undefined (0) on the goal cell
        align = math.cos(o["heading"] - math.atan2(dy, dx)) if dist > 0 else 0.0
        args = (o["labels"], query)
        rest = (dist, align, min(o["n_visible"] / 300.0, 1.0), False)
        plain.append(candidate_features(*args, None, *rest))
        aug.append(candidate_features(*args, retrieved, *rest))
    return PreparedTask(task, gt, retrieved, np.array(plain), np.array(aug))


@dataclass
class Context:
    task_id: str
    instruction: str
    frames: list[int]  # observation indices, shuffled
    gt_pos: int
    features: np.ndarray
    mask: int
    experience: str  # injected rule text, or the empty marker, or "" when m = 0
    rule_ids: list[str] = field(default_factory=list)

    def text(self) -> str:
        parts = [self.instruction, " ".join(f"<frame{i}>" for i in self.frames)]
        if self.mask:
            parts.append(self.experience)
        return " | ".join(parts)


def build_context(prep: PreparedTask, mask: int, rng: np.random.Generator, n_frames: int = 4) -> Context:
    """Ground-truth frame plus ``n_frames - 1`` distinct others, in shuffled order."""
    n = len(prep.task.observations)
    if not 0 <= prep.gt < n:
        raise GroundTruthMissing(prep.task.task_id)
    others = [i for i in range(n) if i != prep.gt]
    take = min(n_frames - 1, len(others))
    frames = [prep.gt] + [others[int(i)] for i in rng.choice(len(others), size=take, replace=False)]
    order = rng.permutation(len(frames))
    frames = [frames[int(i)] for i in order]
    feats = (prep.augmented if mask else prep.plain)[frames]
    if mask:
        exp = prep.retrieved.text() if not prep.retrieved.empty else EMPTY_EXPERIENCE
        ids = prep.retrieved.ids
    else:
        exp, ids = "", []
    return Context(prep.task.task_id, prep.task.instruction, frames, frames.index(prep.gt), feats, int(mask), exp, ids)


def answer_for(ctx: Context, prep: PreparedTask, choice: int) -> str:
    if choice == ctx.gt_pos:
        return prep.task.ground_truth.answer_text
    labels = prep.task.observations[ctx.frames[choice]]["labels"]
    return ", ".join(labels) if labels else "nothing"


def choice_rewards(ctx: Context, prep: PreparedTask, cfg: EvolutionConfig) -> np.ndarray:
    truth = prep.task.ground_truth.answer_text
    out = []
    for a in range(len(ctx.frames)):
        ok = a == ctx.gt_pos
        out.append(reward(True, ok, answer_for(ctx, prep, a), truth, not ok, cfg))
    return np.array(out)


def rollout(policy: ReferencePolicy, ctx: Context, prep: PreparedTask, cfg: EvolutionConfig, rng) -> RolloutGroup:
    logp = policy.log_probs(ctx.features)
    actions = rng.choice(len(logp), size=cfg.group_size, p=np.exp(logp))
    table = choice_rewards(ctx, prep, cfg)
    rewards = table[actions]
    return RolloutGroup(
        ctx.features,
        ctx.mask,
        actions,
        logp[actions],
        rewards,
        group_advantages(rewards, cfg.epsilon_stab),
        [answer_for(ctx, prep, int(a)) for a in actions],
    )


def validation_contexts(prepared: Sequence[PreparedTask], n_frames: int) -> list[tuple[Context, np.ndarray, PreparedTask]]:
    """Fixed frame draws per validation task, once with and once without experience."""
    out = []
    for i, p in enumerate(prepared):
        for m in (0, 1):
            ctx = build_context(p, m, np.random.default_rng([VALIDATION_SEED, i]), n_frames)
            out.append((ctx, choice_rewards(ctx, p, EvolutionConfig()), p))
    return out


def validation_reward(policy: ReferencePolicy, contexts) -> float:
    """Expected reward under the policy, averaged over tasks and both mask values."""
    if not contexts:
        return float("nan")
    return float(np.mean([policy.probs(ctx.features) @ table for ctx, table, _ in contexts]))


@dataclass
class TraceRow:
    step: int
    eta: float
    r_val: float
    mean_reward: float
    mean_kl: float
    clip_frac_exp: float
    clip_frac_std: float
    grad_norm: float


@dataclass
class TrainingTrace:
    rows: list[TraceRow] = field(default_factory=list)
    max_ratio_exp: list[float] = field(default_factory=list)  # per step, over all epochs
    validations: list[tuple[int, float]] = field(default_factory=list)  # (step, raw validation reward)
    final_validation: float = float("nan")
    masks: list[list[int]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.rows:
            w.writerow([r.step] + [_fmt(getattr(r, c)) for c in TRACE_COLUMNS[1:]])
        return buf.getvalue()

    @staticmethod
    def read_csv(text: str) -> list[dict]:
        rows = list(csv.DictReader(io.StringIO(text)))
        for r in rows:
            if tuple(r) != TRACE_COLUMNS:
                raise ValueError("trace columns do not match the schema")
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in rows]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def config_hash(cfg: EvolutionConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def train(
    train_tasks: Sequence[PreparedTask],
    val_tasks: Sequence[PreparedTask],
    policy: ReferencePolicy,
    cfg: EvolutionConfig,
) -> TrainingTrace:
    """Run ``cfg.training_steps`` steps; ``policy`` is updated in place.

    Each group draws its task, its experience mask (Bernoulli eta), its frame
    order and its G sampled answers from a stream seeded by (seed, step, group).
    """
    trace = TrainingTrace()
    if cfg.training_steps <= 0:
        return trace
    if not train_tasks:
        raise ValueError("training split is empty")
    train_ids = {p.task.task_id for p in train_tasks}
    if any(p.task.task_id in train_ids for p in val_tasks):
        raise ValueError("validation split overlaps the training split")
    val_ctx = validation_contexts(val_tasks, cfg.n_frames)
    fixed = cfg.eta_fixed is not None
    eta = cfg.eta_fixed if fixed else cfg.eta_init
    r_val = float("nan")
    for step in range(cfg.training_steps):
        batch = []
        for g in range(cfg.groups_per_step):
            rng = np.random.default_rng([cfg.seed, step, g])
            prep = train_tasks[int(rng.integers(len(train_tasks)))]
            m = int(rng.random() < eta)
            ctx = build_context(prep, m, rng, cfg.n_frames)
            batch.append(rollout(policy, ctx, prep, cfg, rng))
        max_exp = 0.0
        for _ in range(cfg.update_epochs):
            rep = policy_update(policy, batch, cfg)
            if any(g.mask for g in batch):
                max_exp = max(max_exp, rep.max_ratio_exp)
        trace.max_ratio_exp.append(max_exp)
        trace.masks.append([g.mask for g in batch])
        if val_ctx and (step + 1) % cfg.validation_interval == 0:
            v = validation_reward(policy, val_ctx)
            trace.validations.append((step, v))
            r_val = v if math.isnan(r_val) else max(r_val, v)
        trace.rows.append(
            TraceRow(
                step,
                eta,
                r_val,
                float(np.mean([g.mean for g in batch])),
                rep.mean_kl,
                rep.clip_frac_exp,
                rep.clip_frac_std,
                rep.grad_norm,
            )
        )
        if not fixed and not math.isnan(r_val):
            eta = eta_schedule(r_val, cfg)
    trace.final_validation = validation_reward(policy, val_ctx)
    return trace


def replay_eta(r_vals: Sequence[float], cfg: EvolutionConfig) -> list[float]:
    """Eta used at each step, recomputed from the logged best-so-far validation rewards."""
    out, eta = [], cfg.eta_init
    for r in r_vals:
        out.append(eta)
        if not math.isnan(r):
            eta = eta_schedule(r, cfg)
    return out


def split_tasks(tasks: Sequence[TaskTuple], train_fraction: float = 0.9) -> tuple[list[TaskTuple], list[TaskTuple]]:
    """Deterministic split by task order: the first share trains, the rest validates."""
    if not 0 < train_fraction <= 1:
        raise ValueError("train_fraction must be in (0, 1]")
    n = int(round(len(tasks) * train_fraction))
    if len(tasks) > 1 and n == len(tasks) and train_fraction < 1:
        n -= 1
    return list(tasks[:n]), list(tasks[n:])

"""Linear-softmax reference policy and the clipped, KL-regularised update."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..experience import RetrievedContext, embed
from .objective import EvolutionConfig, aac_objective, clip_active

FEATURES = (
    "distance_cost",
    "novelty",
    "experience_match",
    "heading_alignment",
    "is_memory",
    "query_match",
    "object_count",
    "bias",
)
N_FEATURES = len(FEATURES)


class NonFiniteGradient(FloatingPointError):
    pass


def _cos_text(a: str, b: str) -> float:
    if not a.strip() or not b.strip():
        return 0.0
    return float(embed(a) @ embed(b))


def candidate_features(
    labels,
    query: str,
    retrieved: RetrievedContext | None,
    distance_m: float,
    heading_cos: float,
    novelty: float,
    is_memory: bool,
) -> np.ndarray:
    """Feature vector for one candidate view or buffer node.

    Experience match is the best cosine between a retrieved rule's scene
    description and the candidate's labels; it is zero without experience.
    """
    desc = " ".join(labels)
    exp = 0.0
    if retrieved is not None and desc:
        exp = max((_cos_text(r.scene_text, desc) for r, _ in retrieved.rules), default=0.0)
    return np.array(
        [
            -distance_m / 5.0,
            novelty,
            exp,
            heading_cos,
            float(is_memory),
            _cos_text(query, desc),
            min(len(labels), 5) / 5.0,
            1.0,
        ]
    )


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


class ReferencePolicy:
    """pi(a | x) proportional to exp(w . phi(x, a) / temperature)."""

    def __init__(self, dim: int = N_FEATURES, temperature: float = 1.0, w=None, w_ref=None):
        self.w = np.zeros(dim) if w is None else np.asarray(w, dtype=np.float64).copy()
        self.w_ref = self.w.copy() if w_ref is None else np.asarray(w_ref, dtype=np.float64).copy()
        self.temperature = temperature

    @property
    def dim(self) -> int:
        return len(self.w)

    def log_probs(self, features: np.ndarray, w=None) -> np.ndarray:
        w = self.w if w is None else w
        return log_softmax(features @ w / self.temperature)

    def probs(self, features: np.ndarray, w=None) -> np.ndarray:
        return np.exp(self.log_probs(features, w))

    def scores(self, features: np.ndarray) -> np.ndarray:
        return features @ self.w

    def copy(self) -> "ReferencePolicy":
        return ReferencePolicy(self.dim, self.temperature, self.w, self.w_ref)

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "w_ref": self.w_ref.tolist(), "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d: dict) -> "ReferencePolicy":
        return cls(len(d["w"]), d.get("temperature", 1.0), d["w"], d["w_ref"])


@dataclass
class RolloutGroup:
    features: np.ndarray  # (n_candidates, d), shared by every sample in the group
    mask: int
    actions: np.ndarray
    old_log_probs: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    answers: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(self.rewards.mean())

    @property
    def std(self) -> float:
        return float(self.rewards.std())


@dataclass
class UpdateReport:
    objective: float
    mean_kl: float
    grad_norm: float
    clip_frac_exp: float
    clip_frac_std: float
    max_ratio_exp: float = 1.0
    max_ratio: float = 1.0


def kl_to_reference(policy: ReferencePolicy, features: np.ndarray, w=None) -> float:
    lp = policy.log_probs(features, w)
    lq = policy.log_probs(features, policy.w_ref)
    return float(np.exp(lp) @ (lp - lq))


def objective_and_grad(policy: ReferencePolicy, batch, cfg: EvolutionConfig, w=None):
    """Mean over samples of the clipped surrogate minus beta * KL, with its exact gradient."""
    w = policy.w if w is None else w
    tau = policy.temperature
    n_samples = sum(len(g.actions) for g in batch)
    total = 0.0
    grad = np.zeros_like(w)
    kls, ratios_exp, ratios = [], [], []
    clipped = {0: [0, 0], 1: [0, 0]}
    for g in batch:
        phi = g.features
        lp = log_softmax(phi @ w / tau)
        p = np.exp(lp)
        mean_phi = p @ phi
        new_lp = lp[g.actions]
        rho = np.exp(new_lp - g.old_log_probs)
        surr = aac_objective(rho, g.advantages, np.full(len(rho), g.mask), cfg)
        active = ~clip_active(rho, g.advantages, np.full(len(rho), g.mask), cfg)
        # d rho / dw = rho * (phi_a - E[phi]) / tau
        coef = np.where(active, g.advantages * rho, 0.0)
        grad += coef @ (phi[g.actions] - mean_phi) / tau
        lq = log_softmax(phi @ policy.w_ref / tau)
        kl = float(p @ (lp - lq))
        dkl_dz = p * (lp - lq - kl)
        grad -= cfg.beta_kl * len(rho) * (dkl_dz @ phi) / tau
        total += float(np.sum(surr)) - cfg.beta_kl * len(rho) * kl
        kls.append(kl)
        clipped[g.mask][0] += int(np.sum(~active))
        clipped[g.mask][1] += len(rho)
        ratios.extend(rho.tolist())
        if g.mask == 1:
            ratios_exp.extend(rho.tolist())
    total /= n_samples
    grad /= n_samples
    stats = {
        "mean_kl": float(np.mean(kls)) if kls else 0.0,
        "clip_frac_exp": clipped[1][0] / clipped[1][1] if clipped[1][1] else 0.0,
        "clip_frac_std": clipped[0][0] / clipped[0][1] if clipped[0][1] else 0.0,
        "max_ratio_exp": max(ratios_exp, default=1.0),
        "max_ratio": max(ratios, default=1.0),
    }
    return total, grad, stats


def objective_value(policy: ReferencePolicy, batch, cfg: EvolutionConfig, w) -> float:
    """Objective only, computed independently of the gradient path (used by finite differences)."""
    tau = policy.temperature
    vals = []
    for g in batch:
        lp = log_softmax(g.features @ w / tau)
        lq = log_softmax(g.features @ policy.w_ref / tau)
        kl = float(np.exp(lp) @ (lp - lq))
        rho = np.exp(lp[g.actions] - g.old_log_probs)
        for r, a in zip(rho, g.advantages):
            vals.append(aac_objective(r, a, g.mask, cfg) - cfg.beta_kl * kl)
    return float(np.mean(vals))


def policy_update(policy: ReferencePolicy, batch, cfg: EvolutionConfig) -> UpdateReport:
    """One gradient-ascent step on the clipped surrogate minus the KL penalty."""
    for g in batch:
        if g.mask not in (0, 1):
            raise ValueError("group mask must be 0 or 1")
    obj, grad, stats = objective_and_grad(policy, batch, cfg)
    gnorm = float(np.linalg.norm(grad))
    if not np.isfinite(gnorm) or not np.isfinite(obj):
        raise NonFiniteGradient(f"non-finite gradient (norm={gnorm}, objective={obj})")
    policy.w = policy.w + cfg.learning_rate * grad
    return UpdateReport(obj, stats["mean_kl"], gnorm, stats["clip_frac_exp"], stats["clip_frac_std"], stats["max_ratio_exp"], stats["max_ratio"])


def save_checkpoint(path, policy: ReferencePolicy, step: int, cfg_hash: str) -> None:
    with open(path, "w") as fh:
        json.dump({"w": policy.w.tolist(), "w_ref": policy.w_ref.tolist(), "step": step, "cfg_hash": cfg_hash, "temperature": policy.temperature}, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ReferencePolicy, dict]:
    with open(path) as fh:
        d = json.load(fh)
    return ReferencePolicy.from_dict(d), d

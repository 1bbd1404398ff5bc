"""Reward shaping, injection schedule, group advantages and the asymmetric clipped surrogate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

_PUNCT = ".,!?;:\"'()"


@dataclass
class EvolutionConfig:
    w_f: float = 0.1
    w_acc: float = 1.0
    p_err: float = 0.5
    p_err_always: bool = False
    eta_init: float = 0.8
    eta_min: float = 0.0
    eta_fixed: float | None = None  # None -> validation-driven schedule
    r_target: float = 1.5
    eps_std: float = 0.2
    eps_exp: float = 1.0
    beta_kl: float = 0.01
    group_size: int = 5
    groups_per_step: int = 8
    update_epochs: int = 8
    learning_rate: float = 0.5
    temperature: float = 1.0
    gamma: float = 1.0  # kept for the discounted objective; single-decision updates ignore it
    validation_interval: int = 5
    training_steps: int = 150
    n_frames: int = 4
    retrieval_k: int = 1
    epsilon_stab: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.eta_min <= self.eta_init <= 1:
            raise ValueError("need 0 <= eta_min <= eta_init <= 1")
        if not 0 < self.eps_std <= self.eps_exp:
            raise ValueError("need 0 < eps_std <= eps_exp")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self.r_target > 0:
            raise ValueError("r_target must be positive")
        if self.eta_fixed is not None and not 0 <= self.eta_fixed <= 1:
            raise ValueError("eta_fixed must be a probability")

    def to_dict(self) -> dict:
        return asdict(self)


def _tokens(text: str) -> list[str]:
    out = []
    for tok in text.lower().split():
        tok = tok.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: str, reference: str) -> float:
    """Rouge-L F1 over lower-cased whitespace tokens (edge punctuation stripped)."""
    c, r = _tokens(candidate), _tokens(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def reward(format_ok: bool, match_ok: bool, answer: str, truth: str, error_flag: bool, cfg: EvolutionConfig) -> float:
    sim = rouge_l_f1(answer, truth) if match_ok else 0.0
    penalty = cfg.p_err if (error_flag or cfg.p_err_always) else 0.0
    return cfg.w_f * float(format_ok) + cfg.w_acc * (float(match_ok) * (1.0 + sim) - penalty)


def eta_schedule(r_val: float, cfg: EvolutionConfig) -> float:
    return max(cfg.eta_min, cfg.eta_init * (1.0 - min(r_val, cfg.r_target) / cfg.r_target))


def group_advantages(rewards, epsilon_stab: float = 1e-8) -> np.ndarray:
    """Standardise rewards within one group (population std)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if not epsilon_stab > 0:
        raise ValueError("epsilon_stab must be positive")
    if np.all(r == r[0]):
        return np.zeros_like(r)  # exact zeros; r - mean would leave rounding noise / epsilon
    d = r - r.mean()
    d -= d.mean()  # second pass removes most of the mean's rounding error
    return d / (r.std() + epsilon_stab)


def eps_up(mask, cfg: EvolutionConfig):
    return np.where(np.asarray(mask) == 1, cfg.eps_exp, cfg.eps_std)


def aac_objective(rho, adv, mask, cfg: EvolutionConfig):
    """min(rho*A, clip(rho, 1-eps_std, 1+eps_up(m))*A); broadcasts over arrays."""
    rho = np.asarray(rho, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    clipped = np.clip(rho, 1.0 - cfg.eps_std, 1.0 + eps_up(mask, cfg))
    out = np.minimum(rho * adv, clipped * adv)
    return float(out) if out.ndim == 0 else out


def clipped_surrogate(rho, adv, eps: float):
    """Symmetric PPO/GRPO clip, kept separate as a regression reference."""
    rho = np.asarray(rho, dtype=np.float64)
    out = np.minimum(rho * adv, np.clip(rho, 1.0 - eps, 1.0 + eps) * adv)
    return float(out) if out.ndim == 0 else out


def clip_active(rho, adv, mask, cfg: EvolutionConfig):
    """True where the clipped branch is strictly selected (zero gradient)."""
    rho = np.asarray(rho, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    hi = 1.0 + eps_up(mask, cfg)
    lo = 1.0 - cfg.eps_std
    return ((adv > 0) & (rho > hi)) | ((adv < 0) & (rho < lo))


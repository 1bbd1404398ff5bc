"""Deterministic SVG figures for training traces and metric reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp so identical data gives identical bytes
matplotlib.rcParams["svg.hashsalt"] = "sage"
matplotlib.rcParams["svg.fonttype"] = "none"
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_trace(rows: Sequence, path) -> Path:
    """Mean reward and eta against step, eta on a second axis."""
    steps = [r.step for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, [r.mean_reward for r in rows], color="tab:blue", lw=1.2, label="mean reward")
    val = [(r.step, r.r_val) for r in rows if not math.isnan(r.r_val)]
    if val:
        ax.plot(*zip(*val), color="tab:green", lw=1.0, ls="--", label="best validation")
    ax.set_xlabel("step")
    ax.set_ylabel("reward")
    ax2 = ax.twinx()
    ax2.plot(steps, [r.eta for r in rows], color="tab:red", lw=1.0, label="eta")
    ax2.set_ylabel("eta")
    ax2.set_ylim(-0.05, 1.05)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [l.get_label() for l in lines], loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(rows: Sequence[dict], path) -> Path:
    """Grouped bars per category for whichever metrics are present."""
    keys = [k for k in ("SR", "SPL", "SR_llm", "SPL_llm") if any(r.get(k) not in ("", None) for r in rows)]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(rows)), 3.5))
    width = 0.8 / max(len(keys), 1)
    for j, k in enumerate(keys):
        xs = [i + j * width for i in range(len(rows))]
        ys = [float(r[k]) if r.get(k) not in ("", None) else 0.0 for r in rows]
        ax.bar(xs, ys, width=width, label=k)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels([r["category"] for r in rows], rotation=30, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    if keys:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)

"""Success-rate and path-efficiency metrics, with a deterministic rubric judge."""

from __future__ import annotations

import csv
import io
import re
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .evolution.objective import rouge_l_f1


class EmptyRecords(ValueError):
    pass


@dataclass(frozen=True)
class JudgeScore:
    raw: int

    def __post_init__(self):
        if not 1 <= self.raw <= 5:
            raise ValueError(f"judge score {self.raw} outside [1, 5]")

    @property
    def normalized(self) -> float:
        return (self.raw - 1) / 4.0


@dataclass
class EvalRecord:
    episode_id: str
    shortest: float  # l, meters
    path_length: float  # p, meters
    raw: int | None = None  # judge score for question answering
    success: bool = False  # goal reaching
    failure: bool = False
    category: str = ""

    def __post_init__(self):
        if not self.shortest > 0:
            raise ValueError("shortest path length must be positive")
        if self.path_length < 0:
            raise ValueError("path length must be non-negative")


def _normalize(text: str) -> str:
    return " ".join(re.findall(r"[a-z0-9]+", text.lower()))


def reference_judge(answer: str, truth: str) -> JudgeScore:
    """5 on normalized exact match, else a Rouge-L rubric."""
    if _normalize(answer) == _normalize(truth) and _normalize(truth):
        return JudgeScore(5)
    f = rouge_l_f1(answer, truth)
    if f >= 0.8:
        return JudgeScore(4)
    if f >= 0.5:
        return JudgeScore(3)
    if f >= 0.2:
        return JudgeScore(2)
    return JudgeScore(1)


Judge = Callable[[str, str], JudgeScore]


def _check(records: Sequence[EvalRecord]) -> None:
    if not records:
        raise EmptyRecords("no records")


def _eff(r: EvalRecord) -> float:
    return r.shortest / max(r.path_length, r.shortest)


def sr_llm(records: Sequence[EvalRecord]) -> float:
    _check(records)
    return sum((r.raw - 1) / 4.0 for r in records) / len(records)


def spl_llm(records: Sequence[EvalRecord]) -> float:
    _check(records)
    return sum(0.0 if r.failure else (r.raw - 1) / 4.0 * _eff(r) for r in records) / len(records)


def sr_spl_goal(records: Sequence[EvalRecord]) -> tuple[float, float]:
    _check(records)
    n = len(records)
    return sum(r.success for r in records) / n, sum(_eff(r) for r in records if r.success) / n


def records_from_episodes(episodes: Iterable[dict], judge: Judge = reference_judge) -> list[EvalRecord]:
    """Episode dicts (as written to episodes.jsonl) to evaluation records."""
    out = []
    for e in episodes:
        qa = e["kind"] == "qa"
        raw = None
        if qa:
            raw = judge(e["answer"] or "", e["truth"]).raw if e.get("answer") else 1
        out.append(
            EvalRecord(
                e["episode_id"],
                e["shortest"],
                e["path_length"],
                raw,
                bool(e["success"]),
                failure=qa and e["outcome"] != "AnsweredFromMemory",
                category=e.get("category", ""),
            )
        )
    return out


METRIC_COLUMNS = ("category", "n", "SR", "SPL", "SR_llm", "SPL_llm")


def metric_rows(records: Sequence[EvalRecord]) -> list[dict]:
    """One row per category plus an 'overall' row; blank where a metric does not apply."""
    groups: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in records:
        groups[r.category].append(r)
    rows = []
    for name, recs in [("overall", list(records))] + sorted(groups.items()):
        if not recs:
            continue
        goal = [r for r in recs if r.raw is None]
        qa = [r for r in recs if r.raw is not None]
        row = {"category": name, "n": len(recs), "SR": "", "SPL": "", "SR_llm": "", "SPL_llm": ""}
        if goal:
            row["SR"], row["SPL"] = sr_spl_goal(goal)
        if qa:
            row["SR_llm"], row["SPL_llm"] = sr_llm(qa), spl_llm(qa)
        rows.append(row)
    return rows


def metrics_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in metric_rows(records):
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def read_metrics_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        if tuple(r) != METRIC_COLUMNS:
            raise ValueError("metrics columns do not match the schema")
    return rows

"""Rule store with hashed bag-of-token embeddings and exact top-k retrieval."""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

DEFAULT_DIM = 64

RULE_PATTERN = re.compile(r"^IF (answering|searching) (?P<task>.+?) AND observing (?P<scene>.+?) THEN prioritize this path\.$")
_TOKEN = re.compile(r"[a-z0-9]+")


class EmptyText(ValueError):
    pass


class DuplicateId(KeyError):
    pass


class PatternViolation(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@lru_cache(maxsize=65536)
def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Feature-hashed token counts, L2-normalised."""
    if not text or not text.strip():
        raise EmptyText("cannot embed empty text")
    vec = np.zeros(dim)
    for tok in tokenize(text):
        vec[_bucket(tok, dim)] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        # punctuation-only text still needs a unit vector
        vec[_bucket(text.strip(), dim)] = 1.0
        norm = 1.0
    return vec / norm


def similarity(a: str, b: str, dim: int = DEFAULT_DIM) -> float:
    return float(embed(a, dim) @ embed(b, dim))


def rule_text(task_text: str, scene_text: str, verb: str = "answering") -> str:
    return f"IF {verb} {task_text} AND observing {scene_text} THEN prioritize this path."


@dataclass
class ExperienceRule:
    id: str
    task_text: str
    scene_text: str
    full_text: str
    embedding: np.ndarray | None = None
    trajectory_id: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "task_text": self.task_text,
            "scene_text": self.scene_text,
            "full_text": self.full_text,
            "trajectory_id": self.trajectory_id,
            "embedding": [float(v) for v in self.embedding],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperienceRule":
        return cls(
            d["id"],
            d["task_text"],
            d["scene_text"],
            d["full_text"],
            np.asarray(d["embedding"], dtype=np.float64),
            d.get("trajectory_id", ""),
        )


@dataclass
class RetrievedContext:
    rules: list[tuple[ExperienceRule, float]] = field(default_factory=list)
    k: int = 1

    @property
    def empty(self) -> bool:
        return not self.rules

    @property
    def ids(self) -> list[str]:
        return [r.id for r, _ in self.rules]

    def text(self) -> str:
        return " ".join(r.full_text for r, _ in self.rules)

    def scene_text(self) -> str:
        return " ".join(r.scene_text for r, _ in self.rules)


class ExperienceStore:
    """Append-only rule store. Reads see a consistent snapshot; writes are serialised."""

    def __init__(self, dimension: int = DEFAULT_DIM):
        self.dimension = dimension
        self._rules: list[ExperienceRule] = []
        self._by_id: dict[str, int] = {}
        self._buf = np.zeros((16, dimension))
        self._task_matrix: np.ndarray | None = None
        self._scene_matrix: np.ndarray | None = None
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._rules)

    def __iter__(self):
        return iter(list(self._rules))

    def get(self, rule_id: str) -> ExperienceRule:
        return self._rules[self._by_id[rule_id]]

    def insert(self, rule: ExperienceRule) -> str:
        if not RULE_PATTERN.match(rule.full_text):
            raise PatternViolation(f"rule {rule.id!r} does not match the IF-AND-THEN template")
        if rule.embedding is None:
            rule.embedding = embed(rule.full_text, self.dimension)
        if len(rule.embedding) != self.dimension:
            raise ValueError(f"embedding dimension {len(rule.embedding)} != store dimension {self.dimension}")
        with self._lock:
            if rule.id in self._by_id:
                raise DuplicateId(rule.id)
            n = len(self._rules)
            if n == len(self._buf):
                # readers keep views of the old buffer; rows below n are never rewritten
                grown = np.zeros((2 * n, self.dimension))
                grown[:n] = self._buf[:n]
                self._buf = grown
            self._buf[n] = rule.embedding
            self._by_id[rule.id] = n
            self._rules.append(rule)
            self._task_matrix = self._scene_matrix = None
        return rule.id

    def extend(self, rules) -> None:
        for r in rules:
            self.insert(r)

    def _snapshot(self):
        with self._lock:
            n = len(self._rules)
            return self._rules[:n], self._buf[:n]

    def retrieve(self, query_task: str, query_scene: str = "", k: int = 1) -> RetrievedContext:
        """Exact top-k by cosine; ties keep insertion order."""
        if k < 1:
            raise ValueError("k must be >= 1")
        rules, matrix = self._snapshot()
        if not rules:
            return RetrievedContext([], k)
        q = embed(f"{query_task} {query_scene}".strip(), self.dimension)
        scores = matrix @ q
        # round away summation-order noise so equal texts tie exactly
        order = np.argsort(-np.round(scores, 12), kind="stable")[:k]
        return RetrievedContext([(rules[i], float(scores[i])) for i in order], k)

    def _field_matrices(self):
        with self._lock:
            if self._task_matrix is None:
                self._task_matrix = np.array([embed(r.task_text, self.dimension) for r in self._rules]).reshape(-1, self.dimension)
                self._scene_matrix = np.array([embed(r.scene_text, self.dimension) for r in self._rules]).reshape(-1, self.dimension)
            return self._rules, self._task_matrix, self._scene_matrix

    def retrieve_mismatched(self, query_task: str, query_scene: str, k: int = 1) -> RetrievedContext:
        """Surface-matching task text, semantically divergent scene.

        Takes the top ``2k`` rules by task-text similarity and keeps the ``k``
        whose scene text is least similar to ``query_scene``.
        """
        rules, task_m, scene_m = self._field_matrices()
        if not rules:
            return RetrievedContext([], k)
        tq = embed(query_task, self.dimension)
        pool = np.argsort(-(task_m @ tq), kind="stable")[: 2 * k]
        if query_scene.strip():
            sq = embed(query_scene, self.dimension)
            scene_scores = scene_m[pool] @ sq
        else:
            scene_scores = np.zeros(len(pool))
        pick = pool[np.argsort(scene_scores, kind="stable")[:k]]
        q = embed(f"{query_task} {query_scene}".strip(), self.dimension)
        return RetrievedContext([(rules[i], float(rules[i].embedding @ q)) for i in pick], k)

    def retrieve_random(self, rng: np.random.Generator, query_task: str = "", query_scene: str = "", k: int = 1) -> RetrievedContext:
        rules, _ = self._snapshot()
        if not rules:
            return RetrievedContext([], k)
        pick = rng.choice(len(rules), size=min(k, len(rules)), replace=False)
        text = f"{query_task} {query_scene}".strip()
        q = embed(text, self.dimension) if text else np.zeros(self.dimension)
        ctx = [(rules[int(i)], float(rules[int(i)].embedding @ q)) for i in pick]
        ctx.sort(key=lambda t: -t[1])
        return RetrievedContext(ctx, k)

    # file format: {"dimension": E, "rules": [...]}
    def to_json(self) -> str:
        rules, _ = self._snapshot()
        return json.dumps({"dimension": self.dimension, "rules": [r.to_dict() for r in rules]}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperienceStore":
        d = json.loads(text)
        store = cls(int(d["dimension"]))
        for r in d["rules"]:
            store.insert(ExperienceRule.from_dict(r))
        return store

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ExperienceStore":
        return cls.from_json(Path(path).read_text())

"""Cached fast prediction.

Inference cost for scoring every user against every tag drops from
user-count times tag-count tower passes to one user-tower pass per user
plus one tag-tower pass per tag and task. Per user the cache stores all
expert outputs; per (task, tag) it stores the tag embedding and the gate
weights over that task's experts. Because gate weights depend only on the
tag side, mixing cached vectors reproduces the full forward exactly.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .model import MvkeModel, Task, TASKS, encode_examples
from .data import Example

_HEADER = struct.Struct("<qqq")  # (vectors per row, vector dim, row count)


@dataclass
class UserCache:
    """Per-user expert outputs, shape [n_users, k, d]."""

    user_ids: list[int]
    vectors: np.ndarray

    def __post_init__(self):
        self._index = {u: i for i, u in enumerate(self.user_ids)}

    def lookup(self, user_id: int) -> np.ndarray:
        i = self._index.get(user_id)
        if i is None:
            raise KeyError(f"user {user_id} not cached")
        return self.vectors[i]

    @property
    def stored_values(self) -> int:
        return int(self.vectors.size)

    def save(self, bin_path, index_path) -> None:
        n, k, d = self.vectors.shape
        dtype = "f32" if self.vectors.dtype == np.float32 else "f64"
        code = "<f4" if dtype == "f32" else "<f8"
        with open(bin_path, "wb") as fh:
            fh.write(_HEADER.pack(k, d, n))
            fh.write(np.ascontiguousarray(self.vectors, dtype=code).tobytes())
        Path(index_path).write_text(
            json.dumps({"ids": self.user_ids, "dtype": dtype},
                       separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, bin_path, index_path) -> "UserCache":
        index = json.loads(Path(index_path).read_text(encoding="utf-8"))
        code = "<f4" if index["dtype"] == "f32" else "<f8"
        raw = Path(bin_path).read_bytes()
        k, d, n = _HEADER.unpack_from(raw)
        vectors = np.frombuffer(raw, dtype=code, offset=_HEADER.size)
        return cls(user_ids=list(index["ids"]),
                   vectors=vectors.reshape(n, k, d).copy())


@dataclass
class TaskTagCache:
    """Per-tag embeddings and gate weights for one task."""

    task: Task
    tag_ids: list[int]
    embeddings: np.ndarray  # [n_tags, d]
    gate_weights: np.ndarray  # [n_tags, n_task_experts]
    expert_ids: tuple[int, ...]
    tau: float

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tag_ids)}

    def row(self, tag_id: int) -> int:
        i = self._index.get(tag_id)
        if i is None:
            raise KeyError(f"tag {tag_id} not cached for task {self.task.value}")
        return i

    def save(self, bin_path, index_path) -> None:
        n, d = self.embeddings.shape
        dtype = "f32" if self.embeddings.dtype == np.float32 else "f64"
        code = "<f4" if dtype == "f32" else "<f8"
        payload = np.concatenate(
            [self.embeddings, self.gate_weights.astype(self.embeddings.dtype)], axis=1)
        with open(bin_path, "wb") as fh:
            fh.write(_HEADER.pack(len(self.expert_ids), d, n))
            fh.write(np.ascontiguousarray(payload, dtype=code).tobytes())
        doc = {"task": self.task.value, "ids": self.tag_ids,
               "experts": list(self.expert_ids), "tau": self.tau, "dtype": dtype}
        Path(index_path).write_text(json.dumps(doc, separators=(",", ":")) + "\n",
                                    encoding="utf-8")

    @classmethod
    def load(cls, bin_path, index_path) -> "TaskTagCache":
        doc = json.loads(Path(index_path).read_text(encoding="utf-8"))
        code = "<f4" if doc["dtype"] == "f32" else "<f8"
        raw = Path(bin_path).read_bytes()
        n_w, d, n = _HEADER.unpack_from(raw)
        payload = np.frombuffer(raw, dtype=code, offset=_HEADER.size).reshape(n, d + n_w)
        return cls(task=Task(doc["task"]), tag_ids=list(doc["ids"]),
                   embeddings=payload[:, :d].copy(),
                   gate_weights=payload[:, d:].copy(),
                   expert_ids=tuple(doc["experts"]), tau=float(doc["tau"]))


@dataclass
class TagCache:
    per_task: dict[Task, TaskTagCache]

    def __getitem__(self, task: Task) -> TaskTagCache:
        return self.per_task[task]


@dataclass
class TagAssignment:
    """Per-user ranked tags, scores descending, ties by ascending tag id."""

    task: Task
    top_n: int
    entries: dict[int, list[tuple[int, float]]]

    def rows(self) -> list[dict]:
        out = []
        for user_id in sorted(self.entries):
            for rank, (tag_id, score) in enumerate(self.entries[user_id], start=1):
                out.append({"user_id": user_id, "rank": rank, "tag_id": tag_id,
                            "task": self.task.value, "score": score})
        return out


CACHE_BATCH = 512


def build_caches(model: MvkeModel, users: Sequence[tuple[int, tuple]],
                 tags: Sequence[int],
                 tasks: Sequence[Task] = TASKS) -> tuple[UserCache, TagCache]:
    """One user-tower pass per user, one tag-tower pass per tag per task.

    ``users`` are (user_id, field_values) pairs; invocation counts are
    visible on ``model.counters``.
    """
    user_ids = [u for u, _ in users]
    chunks = []
    for start in range(0, len(users), CACHE_BATCH):
        part = users[start:start + CACHE_BATCH]
        examples = [Example(u, fv, (0,), 0, 0) for u, fv in part]
        batch = encode_examples(examples, model.cfg.schema)
        chunks.append(model.user_expert_outputs(batch))
    vectors = (np.concatenate(chunks)
               if chunks else np.zeros((0, model.cfg.routing.n_experts,
                                        model.cfg.schema.embed_dim)))
    user_cache = UserCache(user_ids, vectors)

    per_task = {}
    for task in tasks:
        tag_ids = [int(t) for t in tags]
        if tag_ids:
            emb, gates, tau = model.tag_side(task, tag_ids)
        else:
            d = model.cfg.schema.embed_dim
            n = len(model.cfg.routing.task_experts(task))
            emb = np.zeros((0, d))
            gates = np.zeros((0, n))
            tau = float(model.params[f"temperature.{task.value}"].data)
        per_task[task] = TaskTagCache(task, tag_ids, emb, gates,
                                      model.cfg.routing.task_experts(task), tau)
    return user_cache, TagCache(per_task)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _mix_and_score(user_vectors: np.ndarray, tag_cache: TaskTagCache,
                   row: int) -> np.ndarray:
    """Scores of one cached tag against users, [n_users]."""
    weights = tag_cache.gate_weights[row]
    experts = list(tag_cache.expert_ids)
    mixed = np.einsum("ukd,k->ud", user_vectors[:, experts, :],
                      weights.astype(user_vectors.dtype))
    tag_vec = tag_cache.embeddings[row]
    dot = mixed @ tag_vec
    norms = (np.linalg.norm(mixed, axis=1) * np.linalg.norm(tag_vec))
    cos = np.clip(dot / np.maximum(norms, 1e-12), -1.0, 1.0)
    return _sigmoid(tag_cache.tau * cos)


def score_from_cache(user_id: int, tag_id: int, task: Task,
                     caches: tuple[UserCache, TagCache]) -> float:
    """Cached score for one (user, tag) pair; exact match of the forward."""
    user_cache, tag_cache = caches
    tc = tag_cache[task]
    row = tc.row(tag_id)
    vectors = user_cache.lookup(user_id)[None, :, :]
    return float(_mix_and_score(vectors, tc, row)[0])


def assign_topk(caches: tuple[UserCache, TagCache], top_n: int,
                task: Task) -> TagAssignment:
    """Exhaustive exact top-N tags per user from the caches alone."""
    if top_n < 1:
        raise ConfigError("top_n must be >= 1")
    user_cache, tag_cache = caches
    tc = tag_cache[task]
    n_tags = len(tc.tag_ids)
    top_n = min(top_n, n_tags)
    scores = np.empty((len(user_cache.user_ids), n_tags))
    for row in range(n_tags):
        scores[:, row] = _mix_and_score(user_cache.vectors, tc, row)
    tag_arr = np.array(tc.tag_ids)
    entries: dict[int, list[tuple[int, float]]] = {}
    for i, user_id in enumerate(user_cache.user_ids):
        # sort by descending score, ascending tag id on ties
        order = np.lexsort((tag_arr, -scores[i]))[:top_n]
        entries[user_id] = [(int(tag_arr[j]), float(scores[i, j])) for j in order]
    return TagAssignment(task, top_n, entries)


def naive_scores(model: MvkeModel, users: Sequence[tuple[int, tuple]],
                 tags: Sequence[int], task: Task) -> np.ndarray:
    """Single-tower regime: one full per-pair forward for every pair."""
    out = np.empty((len(users), len(tags)))
    for i, (user_id, fields) in enumerate(users):
        for j, tag in enumerate(tags):
            ex = Example(user_id, fields, (int(tag),), 0, 0)
            out[i, j] = model.pair_score(ex, task)
    return out


def bench(model: MvkeModel, users: Sequence[tuple[int, tuple]],
          tags: Sequence[int], sizes: Sequence[tuple[int, int]],
          tasks: Sequence[Task] = TASKS) -> list[dict]:
    """Compare naive per-pair inference against the cached path.

    Rows report tower invocation counters and wall time per (n_users,
    n_tags) size; the naive side runs full forwards for every pair and
    task.
    """
    rows = []
    for n_users, n_tags in sizes:
        if n_users > len(users) or n_tags > len(tags):
            raise ConfigError(f"bench size ({n_users}, {n_tags}) exceeds roster")
        sub_users = list(users[:n_users])
        sub_tags = list(tags[:n_tags])

        model.reset_counters()
        t0 = time.perf_counter()
        for task in tasks:
            naive_scores(model, sub_users, sub_tags, task)
        naive_seconds = time.perf_counter() - t0
        naive_counts = dict(model.counters)

        model.reset_counters()
        t0 = time.perf_counter()
        caches = build_caches(model, sub_users, sub_tags, tasks)
        for task in tasks:
            for row in range(n_tags):
                _mix_and_score(caches[0].vectors, caches[1][task], row)
        cached_seconds = time.perf_counter() - t0
        cached_counts = dict(model.counters)

        rows.append({
            "n_users": n_users,
            "n_tags": n_tags,
            "n_tasks": len(tasks),
            "naive_user_tower": naive_counts["user_tower"],
            "naive_tag_tower": naive_counts["tag_tower"],
            "cached_user_tower": cached_counts["user_tower"],
            "cached_tag_tower": cached_counts["tag_tower"],
            "naive_seconds": naive_seconds,
            "cached_seconds": cached_seconds,
            "speedup": naive_seconds / cached_seconds if cached_seconds > 0 else math.inf,
        })
    return rows


def save_caches(caches: tuple[UserCache, TagCache], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    user_cache, tag_cache = caches
    user_cache.save(out / "user_cache.bin", out / "user_cache.json")
    for task, tc in tag_cache.per_task.items():
        tc.save(out / f"tag_cache_{task.value}.bin", out / f"tag_cache_{task.value}.json")


def load_caches(cache_dir, tasks: Sequence[Task] = TASKS) -> tuple[UserCache, TagCache]:
    cache = Path(cache_dir)
    user_bin = cache / "user_cache.bin"
    if not user_bin.exists():
        raise DataError(f"no user cache under {cache}")
    user_cache = UserCache.load(user_bin, cache / "user_cache.json")
    per_task = {}
    for task in tasks:
        per_task[task] = TaskTagCache.load(cache / f"tag_cache_{task.value}.bin",
                                           cache / f"tag_cache_{task.value}.json")
    return user_cache, TagCache(per_task)

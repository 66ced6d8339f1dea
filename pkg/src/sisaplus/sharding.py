"""Datasets, K-shard / R-slice partition plans and erasure requests."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .core import RngState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DataPoint:
    point_id: int
    user_id: str
    features: np.ndarray
    target: float | int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-oriented store of data points.

    ``task`` is ``"classification"`` or ``"regression"``; ``n_classes`` is set
    for classification only.
    """

    point_ids: np.ndarray
    user_ids: tuple[str, ...]
    X: np.ndarray
    y: np.ndarray
    task: str = "classification"
    n_classes: int | None = None
    _row_of: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        ids = np.asarray(self.point_ids, dtype=np.int64)
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64 if self.task == "classification" else np.float64)
        users = tuple(str(u) for u in self.user_ids)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D array")
        n = X.shape[0]
        if not (ids.shape == (n,) and y.shape == (n,) and len(users) == n):
            raise ValueError("point_ids, user_ids, X and y disagree in length")
        if np.any(ids < 0):
            raise ValueError("point ids must be non-negative")
        row_of = {int(p): i for i, p in enumerate(ids)}
        if len(row_of) != n:
            raise ValueError("point ids must be unique")
        if self.task == "classification":
            if self.n_classes is None or self.n_classes < 2:
                raise ValueError("classification datasets need n_classes >= 2")
            if n and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"labels must lie in [0, {self.n_classes})")
        elif self.task != "regression":
            raise ValueError(f"unknown task {self.task!r}")
        for arr in (ids, X, y):
            arr.setflags(write=False)
        object.__setattr__(self, "point_ids", ids)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "user_ids", users)
        object.__setattr__(self, "_row_of", row_of)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def points(self) -> Iterator[DataPoint]:
        for i in range(len(self)):
            yield DataPoint(int(self.point_ids[i]), self.user_ids[i], self.X[i], self.y[i].item())

    def rows(self, point_ids: Iterable[int]) -> np.ndarray:
        try:
            return np.fromiter((self._row_of[int(p)] for p in point_ids), dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown point id {exc.args[0]}") from None

    def has_point(self, point_id: int) -> bool:
        return int(point_id) in self._row_of

    def subset(self, rows: np.ndarray) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.point_ids[rows], tuple(self.user_ids[i] for i in rows),
                       self.X[rows], self.y[rows], self.task, self.n_classes)

    def users(self) -> list[str]:
        return sorted(set(self.user_ids))

    def points_of_user(self, user_id: str) -> list[int]:
        return [int(p) for p, u in zip(self.point_ids, self.user_ids) if u == user_id]


@dataclass(frozen=True)
class UnlearnRequest:
    user_ids: frozenset[str] = frozenset()
    point_ids: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_ids", frozenset(str(u) for u in self.user_ids))
        object.__setattr__(self, "point_ids", frozenset(int(p) for p in self.point_ids))
        if bool(self.user_ids) == bool(self.point_ids):
            raise ValueError("a request names either users or points, and must be non-empty")

    @classmethod
    def users(cls, *user_ids: str) -> "UnlearnRequest":
        return cls(user_ids=frozenset(user_ids))

    @classmethod
    def points(cls, *point_ids: int) -> "UnlearnRequest":
        return cls(point_ids=frozenset(point_ids))

    def resolve(self, dataset: Dataset) -> set[int]:
        """Point ids removed by this request; unknown ids raise ``KeyError``."""
        if self.point_ids:
            missing = sorted(p for p in self.point_ids if not dataset.has_point(p))
            if missing:
                raise KeyError(f"unknown point ids {missing}")
            return set(self.point_ids)
        known = set(dataset.user_ids)
        missing_users = sorted(self.user_ids - known)
        if missing_users:
            raise KeyError(f"unknown user ids {missing_users}")
        return {int(p) for p, u in zip(dataset.point_ids, dataset.user_ids) if u in self.user_ids}

    def describe(self) -> str:
        if self.user_ids:
            return "users:" + ",".join(sorted(self.user_ids))
        return "points:" + ",".join(map(str, sorted(self.point_ids)))


@dataclass(frozen=True, eq=False)
class ShardPlan:
    n_shards: int
    n_slices: int
    master_seed: int
    user_aware: bool
    assignment: dict[int, tuple[int, int]]
    # user-aware mode only; empty when points are dealt at random
    user_map: dict[str, int]
    # point ids per (shard, slice), in dealing order
    cells: tuple[tuple[tuple[int, ...], ...], ...] = field(repr=False, default=())

    def __post_init__(self) -> None:
        if not self.cells:
            buckets = [[[] for _ in range(self.n_slices)] for _ in range(self.n_shards)]
            for pid, (k, r) in self.assignment.items():
                buckets[k][r].append(pid)
            cells = tuple(tuple(tuple(b) for b in shard) for shard in buckets)
            object.__setattr__(self, "cells", cells)

    def shard_sizes(self) -> list[int]:
        return [sum(len(s) for s in shard) for shard in self.cells]

    def slices_of(self, shard: int, removed: Iterable[int] = ()) -> list[list[int]]:
        removed = set(removed)
        return [[p for p in sl if p not in removed] for sl in self.cells[shard]]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ShardPlan):
            return NotImplemented
        return (self.n_shards, self.n_slices, self.master_seed, self.user_aware, self.cells,
                self.user_map) == (other.n_shards, other.n_slices, other.master_seed,
                                   other.user_aware, other.cells, other.user_map)


def _user_shard(user_id: str, master_seed: int, n_shards: int) -> int:
    h = hashlib.blake2b(f"{master_seed}:{user_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % n_shards


def make_shard_plan(dataset: Dataset, n_shards: int, n_slices: int, master_seed: int,
                    user_aware: bool = True) -> ShardPlan:
    """Deal every point to exactly one (shard, slice) cell.

    User-aware mode hashes each user to a shard and deals that shard's points
    round-robin over its slices in dataset order. Otherwise points are
    shuffled with a seeded permutation and dealt round-robin to shards, then
    to slices.
    """
    if n_shards < 1 or n_slices < 1:
        raise ValueError("need at least one shard and one slice")
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")

    assignment: dict[int, tuple[int, int]] = {}
    user_map: dict[str, int] = {}
    if user_aware:
        if any(u == "" for u in dataset.user_ids):
            raise ValueError("user-aware sharding needs a user id on every point")
        n_users = len(set(dataset.user_ids))
        if n_users < n_shards:
            log.warning("%d users for %d shards: some shards will be empty", n_users, n_shards)
        dealt = [0] * n_shards
        for pid, uid in zip(dataset.point_ids, dataset.user_ids):
            k = user_map.setdefault(uid, _user_shard(uid, master_seed, n_shards))
            assignment[int(pid)] = (k, dealt[k] % n_slices)
            dealt[k] += 1
    else:
        perm = RngState(master_seed, (), "plan-permutation").generator().permutation(len(dataset))
        for pos, row in enumerate(perm):
            assignment[int(dataset.point_ids[row])] = (pos % n_shards, (pos // n_shards) % n_slices)

    plan = ShardPlan(n_shards, n_slices, int(master_seed), user_aware, assignment, user_map)
    empty = [k for k, size in enumerate(plan.shard_sizes()) if size == 0]
    if empty:
        raise ValueError(f"shards {empty} received no points; use fewer shards or another seed")
    return plan


def affected_cells(plan: ShardPlan, removed_point_ids: Iterable[int]) -> dict[int, int]:
    """Map shard index to the earliest slice containing a removed point."""
    out: dict[int, int] = {}
    for pid in removed_point_ids:
        try:
            k, r = plan.assignment[int(pid)]
        except KeyError:
            raise KeyError(f"point {pid} is not in the plan") from None
        out[k] = min(r, out.get(k, r))
    return dict(sorted(out.items()))


def request_cells(plan: ShardPlan, dataset: Dataset, request: UnlearnRequest) -> dict[int, int]:
    return affected_cells(plan, request.resolve(dataset))


def retained_view(dataset: Dataset, request: UnlearnRequest | Iterable[int]) -> Dataset:
    removed = request.resolve(dataset) if isinstance(request, UnlearnRequest) else set(request)
    keep = np.array([int(p) not in removed for p in dataset.point_ids], dtype=bool)
    if not keep.any():
        raise ValueError("request removes every point; nothing left to train on")
    return dataset.subset(np.flatnonzero(keep))


# -- plan manifest -------------------------------------------------------------

def save_plan(plan: ShardPlan, path: Path) -> None:
    lines = [
        f"K={plan.n_shards}",
        f"R={plan.n_slices}",
        f"master_seed={plan.master_seed}",
        f"mode={'user' if plan.user_aware else 'random'}",
        "# point_id,shard,slice in dealing order; user lines: @user_id,shard",
    ]
    for k, shard in enumerate(plan.cells):
        for r, sl in enumerate(shard):
            lines.extend(f"{p},{k},{r}" for p in sl)
    lines.extend(f"@{u},{k}" for u, k in sorted(plan.user_map.items()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_plan(path: Path) -> ShardPlan:
    header: dict[str, str] = {}
    order: list[tuple[int, int, int]] = []
    user_map: dict[str, int] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            u, k = line[1:].rsplit(",", 1)
            user_map[u] = int(k)
        elif "=" in line:
            key, value = line.split("=", 1)
            header[key] = value
        else:
            p, k, r = (int(x) for x in line.split(","))
            order.append((p, k, r))
    K, R = int(header["K"]), int(header["R"])
    buckets: list[list[list[int]]] = [[[] for _ in range(R)] for _ in range(K)]
    for p, k, r in order:
        buckets[k][r].append(p)
    return ShardPlan(K, R, int(header["master_seed"]), header["mode"] == "user",
                     {p: (k, r) for p, k, r in order}, user_map,
                     tuple(tuple(tuple(b) for b in shard) for shard in buckets))


def point_rows(dataset: Dataset, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    rows = dataset.rows(ids)
    return dataset.X[rows], dataset.y[rows]

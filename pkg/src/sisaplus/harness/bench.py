"""Before/after-unlearning comparison grid for SISA and SISA++."""

from __future__ import annotations

import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..aggregate import EnsembleModel, default_mode, predict_ensemble
from ..core import ArchDescriptor, RngState, count_forward_passes
from ..kv import read_kv, write_kv
from ..sharding import Dataset, UnlearnRequest, make_shard_plan
from ..trainer import TrainConfig
from ..unlearn import Run, execute_unlearn, train_run
from .data import train_test_split
from .metrics import task_metrics

log = logging.getLogger(__name__)

METHODS = ("SISA", "SISA++")


@dataclass(frozen=True)
class GridConfig:
    shards: tuple[int, ...] = (4, 8)
    users_removed: tuple[int, ...] = (1, 2)
    methods: tuple[str, ...] = METHODS
    n_slices: int = 2
    test_fraction: float = 0.2
    seed: int = 0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    hidden_dims: tuple[int, ...] = (128,)
    activation: str = "relu"
    user_aware: bool = True
    shared_init: bool = True
    workers: int = 1

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "GridConfig":
        def ints(s: str) -> tuple[int, ...]:
            return tuple(int(v) for v in s.split(",") if v.strip())

        def flag(s: str) -> bool:
            return s.lower() in ("1", "true", "yes")

        casts = {
            "shards": ints, "users_removed": ints, "hidden_dims": ints,
            "methods": lambda s: tuple(v.strip() for v in s.split(",") if v.strip()),
            "n_slices": int, "seed": int, "epochs": int, "batch_size": int, "workers": int,
            "test_fraction": float, "lr": float, "activation": str,
            "user_aware": flag, "shared_init": flag,
        }
        unknown = set(kv) - set(casts)
        if unknown:
            raise ValueError(f"unknown grid keys {sorted(unknown)}")
        return cls(**{k: casts[k](v) for k, v in kv.items()})

    @classmethod
    def load(cls, path: Path | str) -> "GridConfig":
        return cls.from_kv(read_kv(path))

    def train_config(self, dataset: Dataset) -> TrainConfig:
        out_dim = dataset.n_classes if dataset.task == "classification" else 1
        arch = ArchDescriptor(dataset.feature_dim, self.hidden_dims, out_dim, dataset.task,
                              self.activation)
        return TrainConfig(arch, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           master_seed=self.seed, shared_init=self.shared_init)


@dataclass
class EvalReport:
    method: str
    n_shards: int
    users_removed: int
    phase: str
    metrics: dict[str, float] = field(default_factory=dict)
    before_metrics: dict[str, float] = field(default_factory=dict)
    forward_passes_per_query: float = 0.0
    removed_users: tuple[str, ...] = ()
    ledger: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    error: str = ""
    live_shards: int = 0

    @property
    def key(self) -> str:
        tag = "sisapp" if self.method == "SISA++" else "sisa"
        return f"{tag}_k{self.n_shards}_{self.phase}_u{self.users_removed}"

    def to_kv(self) -> dict[str, str]:
        kv = {
            "method": self.method,
            "shards": str(self.n_shards),
            "users_removed": str(self.users_removed),
            "phase": self.phase,
            "seed": str(self.seed),
            "removed_users": ",".join(self.removed_users),
            "live_shards": str(self.live_shards),
            "forward_passes_per_query": repr(self.forward_passes_per_query),
        }
        kv.update({f"metric.{k}": repr(v) for k, v in self.metrics.items()})
        kv.update({f"before.{k}": repr(v) for k, v in self.before_metrics.items()})
        kv.update({f"delta.{k}": repr(self.metrics[k] - v)
                   for k, v in self.before_metrics.items() if k in self.metrics})
        kv.update({f"ledger.{k}": v for k, v in self.ledger.items()})
        kv["status"] = "error" if self.error else "ok"
        if self.error:
            kv["error"] = self.error.replace("\n", " ")
        return kv


def evaluate(members: Sequence, method: str, test: Dataset) -> tuple[dict[str, float], float]:
    """Metrics of one aggregation method plus forward passes per test query."""
    ens = EnsembleModel(tuple(members), default_mode(test.task, method))
    with count_forward_passes() as calls:
        preds = predict_ensemble(ens, test.X)
    return task_metrics(test.task, preds, test.y, test.n_classes), calls[0] / len(test)


def pick_users(run: Run, n_users: int, seed: int) -> list[str]:
    """Seeded choice of users, each from a different shard when possible."""
    users = sorted(set(run.dataset.user_ids))
    if n_users > len(users):
        raise ValueError(f"cannot remove {n_users} users from {len(users)}")
    gen = RngState(seed, (run.plan.n_shards, n_users), "pick-users").generator()
    order = gen.permutation(len(users))
    chosen: list[str] = []
    used: set[int] = set()
    for i in order:
        u = users[i]
        k = run.plan.user_map.get(u)
        if k is not None and k in used:
            continue
        chosen.append(u)
        if k is not None:
            used.add(k)
        if len(chosen) == n_users:
            return chosen
    # fewer populated shards than requested users: fall back to any distinct users
    for i in order:
        if users[i] not in chosen:
            chosen.append(users[i])
        if len(chosen) == n_users:
            break
    return chosen


def _shard_cells(grid: GridConfig, train: Dataset, test: Dataset, K: int,
                 root: Path) -> list[EvalReport]:
    cfg = grid.train_config(train)
    reports: list[EvalReport] = []
    try:
        plan = make_shard_plan(train, K, grid.n_slices, grid.seed, grid.user_aware)
        run = train_run(train, plan, cfg, root / f"k{K}")
        before_members = list(run.shard_models(0).values())
        before = {m: evaluate(before_members, m, test)[0] for m in grid.methods}
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        log.exception("training K=%d failed", K)
        return [EvalReport(m, K, u, "after", seed=grid.seed, error=f"{type(exc).__name__}: {exc}")
                for u in grid.users_removed for m in grid.methods]

    for n_users in grid.users_removed:
        try:
            users = pick_users(run, n_users, grid.seed)
            outcome = execute_unlearn(run, UnlearnRequest.users(*users), parent=0)
            members = list(run.shard_models(outcome.generation).values())
            for method in grid.methods:
                metrics, fpq = evaluate(members, method, test)
                reports.append(EvalReport(method, K, n_users, "after", metrics, before[method],
                                          fpq, tuple(users), outcome.ledger.to_kv(), grid.seed,
                                          live_shards=len(members)))
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            log.exception("unlearning %d users at K=%d failed", n_users, K)
            reports.extend(EvalReport(m, K, n_users, "after", seed=grid.seed,
                                      error=f"{type(exc).__name__}: {exc}")
                           for m in grid.methods)
    return reports


def _baseline_cells(grid: GridConfig, train: Dataset, test: Dataset, root: Path) -> list[EvalReport]:
    cfg = grid.train_config(train)
    try:
        plan = make_shard_plan(train, 1, grid.n_slices, grid.seed, grid.user_aware)
        run = train_run(train, plan, cfg, root / "k1")
        members = list(run.shard_models(0).values())
        out = []
        for method in grid.methods:
            metrics, fpq = evaluate(members, method, test)
            out.append(EvalReport(method, 1, 0, "before", metrics, {}, fpq, (), {}, grid.seed,
                                      live_shards=len(members)))
        return out
    except Exception as exc:  # noqa: BLE001
        log.exception("baseline training failed")
        return [EvalReport(m, 1, 0, "before", seed=grid.seed, error=f"{type(exc).__name__}: {exc}")
                for m in grid.methods]


def _fmt(task: str, metrics: dict[str, float]) -> list[str]:
    if task == "classification":
        return [f"{100 * metrics[k]:7.2f}" for k in ("accuracy", "macro_f1")]
    return [f"{metrics[k]:7.4f}" for k in ("mae", "rmse")]


def format_table(reports: Sequence[EvalReport], task: str) -> str:
    """Plain-text comparison laid out like the after-unlearning results table."""
    names = ("A(%)", "F1(%)") if task == "classification" else ("MAE", "RMSE")
    head = f"{'condition':<28}{names[0]:>8}{names[1]:>8}   {'d' + names[0]:>9}{'d' + names[1]:>9}"
    lines = [f"task={task}", head, "-" * len(head)]

    def row(label: str, r: EvalReport) -> str:
        if r.error:
            return f"{label:<28}  ERROR: {r.error}"
        vals = _fmt(task, r.metrics)
        deltas = ["", ""]
        if r.before_metrics:
            keys = list(r.metrics)
            scale = 100 if task == "classification" else 1
            deltas = [f"{scale * (r.metrics[k] - r.before_metrics[k]):+9.2f}" for k in keys]
        return f"{label:<28}{vals[0]:>8}{vals[1]:>8}   {deltas[0]:>9}{deltas[1]:>9}"

    before = [r for r in reports if r.phase == "before"]
    if before:
        lines.append("BEFORE UNLEARNING (single model)")
        lines.extend(row(f"  {r.method}", r) for r in before)
    methods = list(dict.fromkeys(r.method for r in reports if r.phase == "after"))
    for method in methods:
        lines.append(" ".join(method))
        cells = [r for r in reports if r.phase == "after" and r.method == method]
        cells.sort(key=lambda r: (r.n_shards, r.users_removed))
        for r in cells:
            noun = "USER" if r.users_removed == 1 else "USERS"
            lines.append(row(f"  {r.users_removed} {noun} REMOVED ({r.n_shards}-shard)", r))
    lines.append("deltas: after minus before on the same sharded run")
    return "\n".join(lines) + "\n"


def run_grid(data: Dataset, grid: GridConfig, out_dir: Path | str,
             overwrite: bool = False) -> list[EvalReport]:
    """Train, evaluate, unlearn and re-evaluate over the full grid.

    Writes one key-value report per cell under ``reports/`` and the combined
    table to ``table.txt``. Reports carry no timing, so a rerun with the same
    seed reproduces them byte for byte.
    """
    out = Path(out_dir)
    runs = out / "runs"
    if runs.exists():
        if not overwrite:
            raise FileExistsError(f"{runs} exists; pass overwrite=True to replace it")
        shutil.rmtree(runs)
    shutil.rmtree(out / "reports", ignore_errors=True)
    (out / "reports").mkdir(parents=True)
    runs.mkdir(parents=True)

    train, test = train_test_split(data, grid.test_fraction, grid.seed)
    jobs = [lambda: _baseline_cells(grid, train, test, runs)]
    jobs += [lambda K=K: _shard_cells(grid, train, test, K, runs) for K in grid.shards]
    if grid.workers > 1:
        with ThreadPoolExecutor(max_workers=grid.workers) as pool:
            results = list(pool.map(lambda job: job(), jobs))
    else:
        results = [job() for job in jobs]
    reports = [r for batch in results for r in batch]

    for r in reports:
        write_kv(out / "reports" / f"{r.key}.txt", r.to_kv())
    (out / "table.txt").write_text(format_table(reports, data.task), encoding="utf-8")
    return reports


def summarize(reports: Sequence[EvalReport]) -> dict[str, float]:
    """Mean after-minus-before delta of the primary metric per method."""
    out = {}
    for method in dict.fromkeys(r.method for r in reports):
        deltas = [next(iter(r.metrics.values())) - next(iter(r.before_metrics.values()))
                  for r in reports if r.method == method and r.before_metrics and not r.error]
        if deltas:
            out[method] = float(np.mean(deltas))
    return out

"""Trained runs, unlearning transactions and erasure verification.

A run directory holds the training data, the frozen shard plan, the training
config and one subdirectory per generation::

    run/
      data.csv  plan.txt  config.txt
      gen-0000/generation.txt  gen-0000/shard-00/stage-00/...
      gen-0001/...

Every unlearning transaction writes a new generation; earlier generations
are never modified.
"""

from __future__ import annotations

import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .core import ModelParams
from .harness.data import read_feature_file, write_feature_file
from .kv import read_kv, write_kv
from .sharding import Dataset, ShardPlan, UnlearnRequest, affected_cells, load_plan, save_plan
from .trainer import (
    CheckpointError,
    CheckpointStore,
    TrainConfig,
    resume_state,
    run_stages,
    stage_steps,
    train_shard,
)


def _ids(text: str) -> set[int]:
    return {int(p) for p in text.split(",") if p}


def _fmt_ids(ids: Iterable[int]) -> str:
    return ",".join(map(str, sorted(ids)))


class Run:
    """Handle on a run directory."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.dataset: Dataset = read_feature_file(self.root / "data.csv")
        self.plan: ShardPlan = load_plan(self.root / "plan.txt")
        self.cfg: TrainConfig = TrainConfig.from_kv(read_kv(self.root / "config.txt"))
        self._merged: dict[int, ModelParams] = {}

    def gen_dir(self, generation: int) -> Path:
        return self.root / f"gen-{generation:04d}"

    def generations(self) -> list[int]:
        return sorted(int(p.name[4:]) for p in self.root.glob("gen-*")
                      if (p / "generation.txt").is_file())

    @property
    def latest(self) -> int:
        gens = self.generations()
        if not gens:
            raise CheckpointError(f"{self.root} holds no complete generation")
        return gens[-1]

    def store(self, generation: int) -> CheckpointStore:
        return CheckpointStore(self.gen_dir(generation))

    def info(self, generation: int) -> dict[str, str]:
        return read_kv(self.gen_dir(generation) / "generation.txt")

    def removed(self, generation: int) -> set[int]:
        return _ids(self.info(generation)["removed"])

    def live_shards(self, generation: int) -> list[int]:
        return sorted(_ids(self.info(generation)["live_shards"]))

    def shard_model(self, generation: int, shard_index: int) -> ModelParams:
        return self.store(generation).final_model(shard_index, self.plan.n_slices)

    def shard_models(self, generation: int | None = None) -> dict[int, ModelParams]:
        g = self.latest if generation is None else generation
        return {k: self.shard_model(g, k) for k in self.live_shards(g)}

    def merged(self, generation: int) -> ModelParams:
        """Weight-averaged model of a generation, computed once and cached."""
        if generation not in self._merged:
            from .aggregate import weight_average

            members = list(self.shard_models(generation).values())
            if not members:
                raise ValueError(f"generation {generation} has no live shard models")
            self._merged[generation] = weight_average(members)
        return self._merged[generation]


def _write_generation(run_root: Path, generation: int, **fields: object) -> None:
    write_kv(run_root / f"gen-{generation:04d}" / "generation.txt",
             {"generation": generation, **fields})


def _map_workers(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_run(dataset: Dataset, plan: ShardPlan, cfg: TrainConfig, root: Path | str,
              workers: int = 1) -> Run:
    """Train every shard and write generation 0."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if any(root.glob("gen-*")):
        raise FileExistsError(f"{root} already holds a trained run")
    write_feature_file(dataset, root / "data.csv")
    save_plan(plan, root / "plan.txt")
    write_kv(root / "config.txt", cfg.to_kv())
    store = CheckpointStore(root / "gen-0000")
    _map_workers(lambda k: train_shard(dataset, plan.slices_of(k), cfg, k, store),
                 range(plan.n_shards), workers)
    _write_generation(root, 0, parent="none", request="none", removed="",
                      live_shards=_fmt_ids(range(plan.n_shards)), affected="", dropped="")
    return Run(root)


def full_retrain_steps(plan: ShardPlan, cfg: TrainConfig, removed: set[int],
                       shards: Iterable[int]) -> int:
    """Optimizer steps a from-scratch retrain of ``shards`` would take."""
    epochs = cfg.stage_epochs(plan.n_slices)
    total = 0
    for k in shards:
        slices = plan.slices_of(k, removed)
        n_union = 0
        for s, sl in enumerate(slices):
            n_union += len(sl)
            if sl:
                total += stage_steps(n_union, epochs[s], cfg.batch_size)
    return total


@dataclass(frozen=True)
class CostLedger:
    shards_retrained: int
    stages_executed: int
    optimizer_steps_executed: int
    optimizer_steps_full_retrain_baseline: int

    @property
    def savings_ratio(self) -> float:
        if self.optimizer_steps_full_retrain_baseline == 0:
            return 1.0
        return 1.0 - self.optimizer_steps_executed / self.optimizer_steps_full_retrain_baseline

    def to_kv(self) -> dict[str, str]:
        return {
            "shards_retrained": str(self.shards_retrained),
            "stages_executed": str(self.stages_executed),
            "optimizer_steps_executed": str(self.optimizer_steps_executed),
            "optimizer_steps_full_retrain_baseline": str(self.optimizer_steps_full_retrain_baseline),
            "savings_ratio": repr(self.savings_ratio),
        }


@dataclass
class UnlearnOutcome:
    generation: int
    parent: int
    request: UnlearnRequest
    affected: dict[int, int]
    models: dict[int, ModelParams]
    dropped: list[int]
    ledger: CostLedger
    removed_points: set[int] = field(default_factory=set)

    def to_kv(self) -> dict[str, str]:
        kv = {
            "generation": str(self.generation),
            "parent": str(self.parent),
            "request": self.request.describe(),
            "removed_points": _fmt_ids(self.removed_points),
            "affected": ",".join(f"{k}:{s}" for k, s in self.affected.items()),
            "refreshed": _fmt_ids(self.models),
            "dropped": _fmt_ids(self.dropped),
        }
        kv.update({f"ledger.{k}": v for k, v in self.ledger.to_kv().items()})
        return kv


def execute_unlearn(run: Run, request: UnlearnRequest, parent: int | None = None,
                    workers: int = 1) -> UnlearnOutcome:
    """Erase the requested points and retrain only the shards that held them.

    Affected shards resume from the last checkpoint before their earliest
    affected slice; the rest are carried over byte for byte. A shard left
    with no points is dropped from the ensemble.
    """
    parent = run.latest if parent is None else parent
    plan, cfg, dataset = run.plan, run.cfg, run.dataset
    prior = run.removed(parent)
    live_before = run.live_shards(parent)

    if request.point_ids:
        stale = sorted(p for p in request.point_ids if p in prior)
        if stale:
            raise KeyError(f"points {stale} were already erased")
        new = request.resolve(dataset)
    else:
        new = request.resolve(dataset) - prior
        if not new:
            raise KeyError(f"users {sorted(request.user_ids)} have no remaining points")
    removed = prior | new
    if len(removed) == len(dataset):
        raise ValueError("request would erase every remaining point")
    cells = affected_cells(plan, new)

    generation = max(run.generations()) + 1
    gen_dir = run.gen_dir(generation)
    tmp_root = Path(tempfile.mkdtemp(prefix=f".gen-{generation:04d}-", dir=run.root))
    store = CheckpointStore(tmp_root)
    old_store = run.store(parent)
    try:
        for k in live_before:
            if k not in cells:
                store.copy_stages_from(old_store, k, range(plan.n_slices))

        dropped = [k for k in cells if not any(plan.slices_of(k, removed))]
        retrain = [k for k in cells if k not in dropped]

        def redo(k: int) -> tuple[int, ModelParams, int]:
            s_min = cells[k]
            slices = plan.slices_of(k, removed)
            store.copy_stages_from(old_store, k, range(s_min))
            model, opt = resume_state(store, k, s_min, slices, cfg)
            model, steps = run_stages(dataset, slices, cfg, k, store, s_min, model, opt)
            return k, model, steps

        results = _map_workers(redo, retrain, workers)
        live_after = [k for k in live_before if k not in dropped]
        ledger = CostLedger(
            shards_retrained=len(retrain),
            stages_executed=sum(plan.n_slices - cells[k] for k in retrain),
            optimizer_steps_executed=sum(steps for _, _, steps in results),
            optimizer_steps_full_retrain_baseline=full_retrain_steps(plan, cfg, removed, live_after),
        )
        outcome = UnlearnOutcome(generation, parent, request, cells,
                                 {k: m for k, m in (r[:2] for r in results)}, dropped, ledger, new)
        write_kv(tmp_root / "generation.txt", {
            "generation": generation, "parent": parent, "request": request.describe(),
            "removed": _fmt_ids(removed), "live_shards": _fmt_ids(live_after),
            "affected": outcome.to_kv()["affected"], "dropped": _fmt_ids(dropped),
        })
        write_kv(tmp_root / "unlearn-report.txt", outcome.to_kv())
        tmp_root.rename(gen_dir)
    except BaseException:
        shutil.rmtree(tmp_root, ignore_errors=True)
        raise
    run._merged.pop(generation, None)
    return outcome


@dataclass
class VerifyReport:
    checks: dict[str, bool]
    details: dict[str, str]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_kv(self) -> dict[str, str]:
        kv = {f"check.{k}": "pass" if v else "fail" for k, v in self.checks.items()}
        kv.update({f"detail.{k}": v for k, v in self.details.items()})
        kv["result"] = "pass" if self.passed else "fail"
        return kv


def _stage_files(store: CheckpointStore, k: int, s: int) -> dict[str, bytes]:
    d = store.path(k, s)
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def verify_erasure(run: Run, before: int, after: int) -> VerifyReport:
    """Check a generation against its parent.

    ``no_removed_in_training_sets``: no erased id appears in any stage's
    training list. ``affected_match_oracle``: each retrained shard equals a
    from-scratch retrain on its retained data. ``unaffected_unchanged``: all
    other shards are byte-identical to the parent generation.
    """
    info = run.info(after)
    if info["parent"] != str(before):
        raise ValueError(f"generation {after} descends from {info['parent']}, not {before}")
    plan, cfg = run.plan, run.cfg
    removed = _ids(info["removed"])
    affected = {int(a.split(":")[0]) for a in info["affected"].split(",") if a}
    after_store, before_store = run.store(after), run.store(before)
    checks: dict[str, bool] = {}
    details: dict[str, str] = {}

    leaked: list[str] = []
    for k in run.live_shards(after):
        for s in range(plan.n_slices):
            try:
                ids = set(after_store.read(k, s).point_ids)
            except CheckpointError as exc:
                leaked.append(f"shard {k} stage {s} unreadable: {exc}")
                continue
            if ids & removed:
                leaked.append(f"shard {k} stage {s}")
    checks["no_removed_in_training_sets"] = not leaked
    details["no_removed_in_training_sets"] = "; ".join(leaked) or "ok"

    mismatched: list[str] = []
    with tempfile.TemporaryDirectory() as tmp:
        oracle_store = CheckpointStore(tmp)
        for k in sorted(affected & set(run.live_shards(after))):
            oracle = train_shard(run.dataset, plan.slices_of(k, removed), cfg, k, oracle_store)
            final = after_store.path(k, plan.n_slices - 1)
            stored = (final / "params.bin").read_bytes() if final.is_dir() else b""
            oracle_opt = (oracle_store.path(k, plan.n_slices - 1) / "opt.bin").read_bytes()
            stored_opt = (final / "opt.bin").read_bytes() if final.is_dir() else b""
            if stored != oracle.to_bytes() or stored_opt != oracle_opt:
                mismatched.append(str(k))
    checks["affected_match_oracle"] = not mismatched
    details["affected_match_oracle"] = ("mismatch in shards " + ",".join(mismatched)
                                        if mismatched else "ok")

    changed: list[str] = []
    for k in run.live_shards(after):
        if k in affected:
            continue
        for s in range(plan.n_slices):
            if _stage_files(after_store, k, s) != _stage_files(before_store, k, s):
                changed.append(f"{k}:{s}")
    checks["unaffected_unchanged"] = not changed
    details["unaffected_unchanged"] = ("changed " + ",".join(changed)) if changed else "ok"
    return VerifyReport(checks, details)


def oracle_models(dataset: Dataset, plan: ShardPlan, cfg: TrainConfig,
                  removed: set[int]) -> dict[int, ModelParams]:
    """From-scratch shard models on the retained data under a fixed plan."""
    out = {}
    with tempfile.TemporaryDirectory() as tmp:
        store = CheckpointStore(tmp)
        for k in range(plan.n_shards):
            slices = plan.slices_of(k, removed)
            if any(slices):
                out[k] = train_shard(dataset, slices, cfg, k, store)
    return out

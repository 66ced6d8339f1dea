"""Slice-incremental shard training with a checkpoint after every stage.

Stage ``s`` trains on the union of slices ``0..s``. Shuffling draws from a
stream keyed by ``(master_seed, shard, stage)`` so that replaying a stage on
fewer points reproduces exactly what a fresh run on that data would do.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    ArchDescriptor,
    ModelParams,
    OptimizerState,
    RngState,
    adam_step,
    arch_from_kv,
    arch_to_kv,
    init_model,
    load_params,
    loss_and_grad,
    save_params,
)
from .kv import read_kv, write_kv
from .sharding import Dataset

log = logging.getLogger(__name__)


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    arch: ArchDescriptor
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    master_seed: int = 0
    shared_init: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def stage_epochs(self, n_slices: int) -> list[int]:
        base = self.epochs // n_slices
        out = [base] * n_slices
        out[-1] += self.epochs - base * n_slices
        return out

    def init_rng(self, shard_index: int) -> RngState:
        if self.shared_init:
            return RngState(self.master_seed, (), "init")
        return RngState(self.master_seed, (shard_index,), "init")

    def shuffle_rng(self, shard_index: int, stage: int) -> RngState:
        return RngState(self.master_seed, (shard_index, stage), "shuffle")

    def fresh_optimizer(self, n: int) -> OptimizerState:
        return OptimizerState.zeros(n, self.lr, self.beta1, self.beta2, self.epsilon)

    def to_kv(self) -> dict[str, str]:
        kv = {f"arch.{k}": v for k, v in arch_to_kv(self.arch).items()}
        kv.update(epochs=str(self.epochs), lr=repr(self.lr), batch_size=str(self.batch_size),
                  beta1=repr(self.beta1), beta2=repr(self.beta2), epsilon=repr(self.epsilon),
                  master_seed=str(self.master_seed), shared_init=str(self.shared_init).lower())
        return kv

    @classmethod
    def from_kv(cls, kv: dict[str, str], arch: ArchDescriptor | None = None) -> "TrainConfig":
        if arch is None:
            arch = arch_from_kv({k[5:]: v for k, v in kv.items() if k.startswith("arch.")})
        cfg = cls(arch)
        casts = {"epochs": int, "batch_size": int, "master_seed": int, "lr": float,
                 "beta1": float, "beta2": float, "epsilon": float,
                 "shared_init": lambda s: s.lower() in ("1", "true", "yes")}
        updates = {k: cast(kv[k]) for k, cast in casts.items() if k in kv}
        return replace(cfg, **updates)


def stage_steps(n_points: int, epochs: int, batch_size: int) -> int:
    return epochs * math.ceil(n_points / batch_size) if n_points else 0


def ids_digest(point_ids: Sequence[int]) -> str:
    return hashlib.sha256(np.asarray(point_ids, dtype="<i8").tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class Checkpoint:
    shard_index: int
    stage: int
    model: ModelParams
    opt: OptimizerState
    rng: RngState
    point_ids: tuple[int, ...]
    epochs: int
    steps: int
    vacuous: bool = False

    @property
    def data_digest(self) -> str:
        return ids_digest(self.point_ids)


class CheckpointStore:
    """Directory of write-once checkpoints keyed by (shard, stage).

    One store holds one run generation; layout is
    ``<root>/shard-KK/stage-SS/{manifest.txt,params.bin,opt.bin}``.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def shard_dir(self, shard_index: int) -> Path:
        return self.root / f"shard-{shard_index:02d}"

    def path(self, shard_index: int, stage: int) -> Path:
        return self.shard_dir(shard_index) / f"stage-{stage:02d}"

    def exists(self, shard_index: int, stage: int) -> bool:
        return (self.path(shard_index, stage) / "manifest.txt").is_file()

    def stages(self, shard_index: int) -> list[int]:
        d = self.shard_dir(shard_index)
        if not d.is_dir():
            return []
        return sorted(int(p.name[6:]) for p in d.glob("stage-*") if (p / "manifest.txt").is_file())

    def write(self, ckpt: Checkpoint) -> None:
        dest = self.path(ckpt.shard_index, ckpt.stage)
        if dest.exists():
            raise CheckpointError(f"checkpoint {dest} already written in this generation")
        dest.parent.mkdir(parents=True, exist_ok=True)
        # build in a sibling temp dir, then rename: a crash never leaves a partial key
        tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}-", dir=dest.parent))
        try:
            save_params(ckpt.model, tmp / "params.txt", tmp / "params.bin")
            (tmp / "opt.bin").write_bytes(ckpt.opt.to_bytes())
            kv = {
                "shard": ckpt.shard_index,
                "stage": ckpt.stage,
                "digest": ckpt.data_digest,
                "n_points": len(ckpt.point_ids),
                "epochs": ckpt.epochs,
                "stage_steps": ckpt.steps,
                "opt_t": ckpt.opt.t,
                "opt_lr": repr(ckpt.opt.lr),
                "opt_beta1": repr(ckpt.opt.beta1),
                "opt_beta2": repr(ckpt.opt.beta2),
                "opt_epsilon": repr(ckpt.opt.epsilon),
                "rng_seed": ckpt.rng.master_seed,
                "rng_path": ",".join(map(str, ckpt.rng.path)),
                "rng_tag": ckpt.rng.tag,
                "vacuous": str(ckpt.vacuous).lower(),
                "point_ids": ",".join(map(str, ckpt.point_ids)),
            }
            write_kv(tmp / "manifest.txt", kv)
            os.replace(tmp, dest)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise

    def read(self, shard_index: int, stage: int) -> Checkpoint:
        d = self.path(shard_index, stage)
        try:
            kv = read_kv(d / "manifest.txt")
            model = load_params(d / "params.txt")
            raw = (d / "opt.bin").read_bytes()
            n = model.params.size
            if len(raw) != 16 * n:
                raise ValueError("optimizer blob has the wrong size")
            mv = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            opt = OptimizerState(int(kv["opt_t"]), mv[:n], mv[n:], float(kv["opt_lr"]),
                                 float(kv["opt_beta1"]), float(kv["opt_beta2"]),
                                 float(kv["opt_epsilon"]))
            ids = tuple(int(p) for p in kv["point_ids"].split(",") if p)
            if ids_digest(ids) != kv["digest"]:
                raise ValueError("point list does not match its digest")
            rng_path = tuple(int(p) for p in kv["rng_path"].split(",") if p)
        except (OSError, KeyError, ValueError) as exc:
            available = self.stages(shard_index)
            raise CheckpointError(
                f"checkpoint shard {shard_index} stage {stage} missing or corrupt ({exc}); "
                f"available stages: {available or 'none'}"
            ) from exc
        return Checkpoint(shard_index, stage, model, opt,
                          RngState(int(kv["rng_seed"]), rng_path, kv["rng_tag"]), ids,
                          int(kv["epochs"]), int(kv["stage_steps"]), kv["vacuous"] == "true")

    def final_model(self, shard_index: int, n_slices: int) -> ModelParams:
        return self.read(shard_index, n_slices - 1).model

    def copy_stages_from(self, other: "CheckpointStore", shard_index: int,
                         stages: Sequence[int]) -> None:
        for s in stages:
            src, dest = other.path(shard_index, s), self.path(shard_index, s)
            if dest.exists():
                raise CheckpointError(f"checkpoint {dest} already written in this generation")
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(src, dest)


def _union(slices: Sequence[Sequence[int]], upto: int) -> list[int]:
    return [p for sl in slices[: upto + 1] for p in sl]


def run_stages(dataset: Dataset, slices: Sequence[Sequence[int]], cfg: TrainConfig,
               shard_index: int, store: CheckpointStore, start_stage: int,
               model: ModelParams, opt: OptimizerState) -> tuple[ModelParams, int]:
    """Execute stages ``start_stage..R-1`` from ``(model, opt)``.

    Returns the final model and the number of optimizer steps executed.
    """
    n_slices = len(slices)
    epochs = cfg.stage_epochs(n_slices)
    executed = 0
    for stage in range(start_stage, n_slices):
        ids = _union(slices, stage)
        rng = cfg.shuffle_rng(shard_index, stage)
        vacuous = len(slices[stage]) == 0
        steps = 0
        if not vacuous:
            X = dataset.X[dataset.rows(ids)]
            y = dataset.y[dataset.rows(ids)]
            gen = rng.generator()
            n = len(ids)
            for _ in range(epochs[stage]):
                order = gen.permutation(n)
                for lo in range(0, n, cfg.batch_size):
                    batch = order[lo : lo + cfg.batch_size]
                    _, grad = loss_and_grad(model, X[batch], y[batch])
                    model, opt = adam_step(model, opt, grad)
                    steps += 1
        else:
            log.debug("shard %d stage %d: slice empty, carrying previous state", shard_index, stage)
        store.write(Checkpoint(shard_index, stage, model, opt, rng, tuple(ids),
                               0 if vacuous else epochs[stage], steps, vacuous))
        executed += steps
    return model, executed


def train_shard(dataset: Dataset, slices: Sequence[Sequence[int]], cfg: TrainConfig,
                shard_index: int, store: CheckpointStore) -> ModelParams:
    model = init_model(cfg.arch, cfg.init_rng(shard_index))
    opt = cfg.fresh_optimizer(model.params.size)
    model, _ = run_stages(dataset, slices, cfg, shard_index, store, 0, model, opt)
    return model


def resume_state(store: CheckpointStore, shard_index: int, from_stage: int,
                 retained_slices: Sequence[Sequence[int]],
                 cfg: TrainConfig) -> tuple[ModelParams, OptimizerState]:
    """Load the state stage ``from_stage`` starts from, checking its digest."""
    if from_stage == 0:
        model = init_model(cfg.arch, cfg.init_rng(shard_index))
        return model, cfg.fresh_optimizer(model.params.size)
    ckpt = store.read(shard_index, from_stage - 1)
    expected = ids_digest(_union(retained_slices, from_stage - 1))
    if ckpt.data_digest != expected:
        raise CheckpointError(
            f"shard {shard_index} stage {from_stage - 1}: stored data digest does not match the "
            "retained prefix; the plan or removal set drifted"
        )
    if ckpt.model.arch != cfg.arch:
        raise CheckpointError(f"shard {shard_index}: checkpoint architecture differs from config")
    return ckpt.model, ckpt.opt


def resume_shard(store: CheckpointStore, shard_index: int, from_stage: int,
                 retained_slices: Sequence[Sequence[int]], cfg: TrainConfig,
                 dataset: Dataset) -> ModelParams:
    """Replay stages ``from_stage..R-1`` on the retained slices.

    ``from_stage == R`` means nothing is affected and returns the stored final
    model.
    """
    n_slices = len(retained_slices)
    if not 0 <= from_stage <= n_slices:
        raise ValueError(f"from_stage must lie in [0, {n_slices}]")
    if from_stage == n_slices:
        return store.final_model(shard_index, n_slices)
    model, opt = resume_state(store, shard_index, from_stage, retained_slices, cfg)
    model, _ = run_stages(dataset, retained_slices, cfg, shard_index, store, from_stage, model, opt)
    return model

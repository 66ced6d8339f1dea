"""Combining shard models: vote / mean ensembles and the weight-averaged merge."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .core import ModelParams, forward_batch

MODES = ("majority_vote", "mean_prediction", "weight_average")


def weight_average(members: Sequence[ModelParams]) -> ModelParams:
    """Elementwise mean of member parameters.

    Members are summed into a zero accumulator in list order and the sum is
    divided by N once. The accumulator is extended precision: on x86 the
    running sum of up to 2**11 float64 values of one magnitude is exact, so
    merging N copies of one model returns that model bit for bit.
    """
    if not members:
        raise ValueError("weight averaging needs at least one model")
    arch = members[0].arch
    for i, m in enumerate(members[1:], 1):
        if m.arch != arch:
            raise ValueError(
                f"members 0 and {i} are not merge-compatible: {arch} vs {m.arch}"
            )
    total = np.zeros(members[0].params.shape, dtype=np.longdouble)
    for m in members:
        total += m.params
    return ModelParams(arch, (total / len(members)).astype(np.float64))


def vote(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Plurality vote along axis 0; ties go to the lowest class index.

    ``labels`` has shape (n_members, n_queries).
    """
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.zeros((labels.shape[1], n_classes), dtype=np.int64)
    for row in labels:
        counts[np.arange(labels.shape[1]), row] += 1
    return counts.argmax(axis=1)


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    members: tuple[ModelParams, ...]
    mode: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        task = self.members[0].arch.task
        if any(m.arch.task != task for m in self.members):
            raise ValueError("members disagree on the task")
        if self.mode == "majority_vote" and task != "classification":
            raise ValueError("majority_vote applies to classification only")
        if self.mode == "mean_prediction" and task != "regression":
            raise ValueError("mean_prediction applies to regression only")
        if self.mode == "weight_average":
            self.merged  # validates compatibility eagerly

    @property
    def task(self) -> str:
        return self.members[0].arch.task

    @cached_property
    def merged(self) -> ModelParams:
        return weight_average(self.members)


def predict_ensemble(ens: EnsembleModel, X: np.ndarray) -> np.ndarray:
    """Predictions for a batch of feature rows (or a single vector).

    Classification returns class indices, regression returns scalars.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if ens.mode == "weight_average":
        out = forward_batch(ens.merged, X)
        preds = out.argmax(axis=1) if ens.task == "classification" else out
    elif ens.mode == "majority_vote":
        labels = np.stack([forward_batch(m, X).argmax(axis=1) for m in ens.members])
        preds = vote(labels, ens.members[0].arch.output_dim)
    else:
        preds = np.mean(np.stack([forward_batch(m, X) for m in ens.members]), axis=0)
    return preds[0] if single else preds


def default_mode(task: str, method: str) -> str:
    """Aggregation mode for a method name: ``SISA`` or ``SISA++``."""
    if method == "SISA++":
        return "weight_average"
    if method == "SISA":
        return "majority_vote" if task == "classification" else "mean_prediction"
    raise ValueError(f"unknown method {method!r}")


def merged_model_of_run(run, generation: int | None = None) -> ModelParams:
    """Weight-averaged model over the live shards of a run generation."""
    g = run.latest if generation is None else generation
    return run.merged(g)


def ensemble_of_run(run, mode: str, generation: int | None = None) -> EnsembleModel:
    g = run.latest if generation is None else generation
    members = tuple(run.shard_models(g).values())
    if not members:
        raise ValueError(f"generation {g} has no live shard models")
    return EnsembleModel(members, mode)

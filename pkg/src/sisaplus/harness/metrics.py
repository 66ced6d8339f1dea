"""Accuracy, macro-F1, MAE and RMSE."""

from __future__ import annotations

import numpy as np


def _paired(preds, truth, dtype):
    p = np.asarray(preds, dtype=dtype)
    t = np.asarray(truth, dtype=dtype)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("metrics need at least one prediction")
    return p, t


def accuracy(preds, truth) -> float:
    p, t = _paired(preds, truth, np.int64)
    return float(np.count_nonzero(p == t)) / p.size


def macro_f1(preds, truth, n_classes: int) -> float:
    """Unweighted mean F1 over the classes that occur in ``truth``.

    A class whose precision and recall are both zero scores 0.
    """
    if n_classes < 2:
        raise ValueError("macro-F1 needs at least two classes")
    p, t = _paired(preds, truth, np.int64)
    if p.min() < 0 or t.min() < 0 or p.max() >= n_classes or t.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    scores = []
    for c in np.unique(t):
        tp = np.count_nonzero((p == c) & (t == c))
        fp = np.count_nonzero((p == c) & (t != c))
        fn = np.count_nonzero((p != c) & (t == c))
        # F1 = 2tp / (2tp + fp + fn); zero when tp == 0
        scores.append(2.0 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return float(np.mean(scores))


def mae(preds, truth) -> float:
    p, t = _paired(preds, truth, np.float64)
    return float(np.mean(np.abs(p - t)))


def rmse(preds, truth) -> float:
    p, t = _paired(preds, truth, np.float64)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def task_metrics(task: str, preds, truth, n_classes: int | None = None) -> dict[str, float]:
    if task == "classification":
        return {"accuracy": accuracy(preds, truth), "macro_f1": macro_f1(preds, truth, n_classes)}
    return {"mae": mae(preds, truth), "rmse": rmse(preds, truth)}

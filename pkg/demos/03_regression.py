"""Regression variant: mean-prediction ensemble against the merged model.

Run with ``python3 demos/03_regression.py``.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from sisaplus import ArchDescriptor, TrainConfig, UnlearnRequest, make_shard_plan
from sisaplus.aggregate import EnsembleModel, predict_ensemble
from sisaplus.harness.data import SynthSpec, gen_synthetic, train_test_split
from sisaplus.harness.metrics import mae, rmse
from sisaplus.unlearn import execute_unlearn, train_run

data = gen_synthetic(SynthSpec(task="regression", n_points=400, n_users=20, dim=8, noise=0.3, seed=1))
train, test = train_test_split(data, 0.25, seed=1)

plan = make_shard_plan(train, n_shards=4, n_slices=2, master_seed=1)
cfg = TrainConfig(ArchDescriptor(8, (32,), 1, task="regression", activation="tanh"),
                  epochs=30, lr=5e-3, master_seed=1)
run = train_run(train, plan, cfg, Path(tempfile.mkdtemp()) / "run")


def score(generation: int) -> None:
    members = tuple(run.shard_models(generation).values())
    for mode in ("mean_prediction", "weight_average"):
        pred = predict_ensemble(EnsembleModel(members, mode), test.X)
        print(f"  gen {generation} {mode:16s} MAE={mae(pred, test.y):.4f} RMSE={rmse(pred, test.y):.4f}")


# %% Before unlearning.
score(0)

# %% Erase two users and rescore.
out = execute_unlearn(run, UnlearnRequest.users(*train.users()[:2]))
print(f"retrained shards {sorted(out.affected)}, savings {out.ledger.savings_ratio:.1%}")
score(out.generation)

"""Exact machine unlearning with sharded, sliced training (SISA) and
weight-averaged shard merging (SISA++)."""

from .aggregate import (
    EnsembleModel,
    ensemble_of_run,
    merged_model_of_run,
    predict_ensemble,
    weight_average,
)
from .core import (
    ArchDescriptor,
    ModelParams,
    OptimizerState,
    RngState,
    adam_step,
    count_forward_passes,
    forward,
    forward_batch,
    init_model,
    load_params,
    loss_and_grad,
    param_count,
    save_params,
)
from .sharding import (
    DataPoint,
    Dataset,
    ShardPlan,
    UnlearnRequest,
    affected_cells,
    load_plan,
    make_shard_plan,
    request_cells,
    retained_view,
    save_plan,
)
from .trainer import Checkpoint, CheckpointError, CheckpointStore, TrainConfig, resume_shard, train_shard
from .unlearn import CostLedger, Run, UnlearnOutcome, execute_unlearn, train_run, verify_erasure

__version__ = "0.1.0"

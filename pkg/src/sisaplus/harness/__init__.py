"""Metrics, data ingestion and the comparison grid runner.

The grid runner lives in :mod:`sisaplus.harness.bench`; it is not imported
here because it depends on the unlearning engine, which itself reads
feature files from this package.
"""

from .data import (
    SynthSpec,
    gen_synthetic,
    read_feature_file,
    read_feature_rows,
    train_test_split,
    write_feature_file,
)
from .metrics import accuracy, macro_f1, mae, rmse, task_metrics

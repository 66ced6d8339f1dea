from __future__ import annotations

import numpy as np
import pytest

from sisaplus import ArchDescriptor, Dataset, TrainConfig
from sisaplus.harness.data import SynthSpec, gen_synthetic


def small_dataset(n_points: int = 120, n_users: int = 24, dim: int = 5, n_classes: int = 3,
                  seed: int = 0, task: str = "classification") -> Dataset:
    return gen_synthetic(SynthSpec(task=task, n_points=n_points, n_users=n_users, dim=dim,
                                   n_classes=n_classes, separation=3.0, seed=seed))


def small_config(ds: Dataset, epochs: int = 4, seed: int = 1, hidden=(8,),
                 batch_size: int = 16) -> TrainConfig:
    out = ds.n_classes if ds.task == "classification" else 1
    arch = ArchDescriptor(ds.feature_dim, hidden, out, ds.task, "tanh")
    return TrainConfig(arch, epochs=epochs, batch_size=batch_size, master_seed=seed)


@pytest.fixture
def cls_data() -> Dataset:
    return small_dataset()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# -- acceptance summary: one line per criterion at the end of the session --------

_acceptance: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    _, outcomes = _acceptance.setdefault(number, (title, []))
    if report.when == "call" or report.failed:
        outcomes.append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, outcomes = _acceptance[number]
        ok = outcomes and all(o == "passed" for o in outcomes)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")

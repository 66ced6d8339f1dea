from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisaplus.aggregate import (
    EnsembleModel,
    ensemble_of_run,
    merged_model_of_run,
    predict_ensemble,
    vote,
    weight_average,
)
from sisaplus.core import ArchDescriptor, ModelParams, count_forward_passes, param_count
from sisaplus.sharding import UnlearnRequest, make_shard_plan
from sisaplus.unlearn import execute_unlearn, train_run

from conftest import small_config, small_dataset

ARCH = ArchDescriptor(4, (8,), 3)


def random_models(n: int, seed: int, arch: ArchDescriptor = ARCH) -> list[ModelParams]:
    gen = np.random.default_rng(seed)
    return [ModelParams(arch, gen.normal(size=param_count(arch))) for _ in range(n)]


def fsum_mean(models: list[ModelParams]) -> np.ndarray:
    stacked = np.stack([m.params for m in models])
    return np.array([math.fsum(col) / len(models) for col in stacked.T])


def brute_vote(labels: tuple[int, ...]) -> int:
    counts = Counter(labels)
    best = max(counts.values())
    return min(c for c, v in counts.items() if v == best)


def test_two_member_mean():
    a = ModelParams(ArchDescriptor(1, (), 1, "regression"), [1.0, 2.0])
    b = ModelParams(ArchDescriptor(1, (), 1, "regression"), [3.0, 4.0])
    assert weight_average([a, b]).params.tolist() == [2.0, 3.0]


def test_single_member_identity():
    (m,) = random_models(1, 0)
    assert weight_average([m]).bit_equal(m)


def test_identical_members_merge_to_themselves():
    (m,) = random_models(1, 1)
    for n in (2, 3, 5, 7, 8, 64):
        assert weight_average([m] * n).bit_equal(m)


def test_close_to_compensated_mean():
    models = random_models(8, 2)
    assert models[0].params.size == 67
    assert np.max(np.abs(weight_average(models).params - fsum_mean(models))) < 1e-12


def test_incompatible_rejected():
    a = random_models(1, 0)[0]
    b = random_models(1, 0, ArchDescriptor(4, (9,), 3))[0]
    with pytest.raises(ValueError, match="members 0 and 2"):
        weight_average([a, a, b])
    with pytest.raises(ValueError):
        weight_average([])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_mean_algebra(n, seed):
    models = random_models(n, seed)
    merged = weight_average(models)
    assert np.max(np.abs(merged.params - fsum_mean(models))) < 1e-12
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = weight_average([models[i] for i in perm])
    assert np.max(np.abs(shuffled.params - merged.params)) < 1e-12
    # idempotence
    assert weight_average([merged] * n).bit_equal(merged)


@pytest.mark.parametrize("votes, winner", [((0, 0, 1), 0), ((1, 0), 0), ((2, 1, 1, 2), 1)])
def test_vote_examples(votes, winner):
    assert vote(np.array(votes)[:, None], 3)[0] == winner


def test_vote_exhaustive():
    for n in range(1, 6):
        for C in range(2, 5):
            combos = list(itertools.product(range(C), repeat=n))
            labels = np.array(combos).T
            got = vote(labels, C)
            assert got.tolist() == [brute_vote(c) for c in combos]


def test_mean_prediction():
    arch = ArchDescriptor(1, (), 1, "regression")
    members = [ModelParams(arch, [0.0, b]) for b in (2.0, 4.0, 9.0)]
    ens = EnsembleModel(members, "mean_prediction")
    assert predict_ensemble(ens, [1.0]) == 5.0


def test_mode_task_mismatch():
    cls = random_models(2, 0)
    reg = [ModelParams(ArchDescriptor(1, (), 1, "regression"), [0.0, 1.0])]
    with pytest.raises(ValueError):
        EnsembleModel(cls, "mean_prediction")
    with pytest.raises(ValueError):
        EnsembleModel(reg, "majority_vote")
    with pytest.raises(ValueError):
        EnsembleModel(cls, "sum")


def test_merged_inference_is_one_forward_pass():
    members = random_models(8, 3)
    X = np.random.default_rng(0).normal(size=(25, 4))
    merged = EnsembleModel(members, "weight_average")
    voted = EnsembleModel(members, "majority_vote")
    with count_forward_passes() as calls:
        predict_ensemble(merged, X)
    assert calls[0] == 25
    with count_forward_passes() as calls:
        predict_ensemble(voted, X)
    assert calls[0] == 8 * 25


def test_merged_model_tracks_generations(tmp_path):
    ds = small_dataset(n_points=100, n_users=25, dim=3)
    plan = make_shard_plan(ds, 4, 2, 0)
    run = train_run(ds, plan, small_config(ds), tmp_path / "run")
    before = merged_model_of_run(run)
    assert before.bit_equal(weight_average(list(run.shard_models(0).values())))
    uid = ds.users()[0]
    out = execute_unlearn(run, UnlearnRequest.users(uid))
    after = merged_model_of_run(run)
    members = run.shard_models(out.generation)
    k = plan.user_map[uid]
    assert members[k].bit_equal(out.models[k])
    assert after.bit_equal(weight_average(list(members.values())))
    assert not after.bit_equal(before)
    assert merged_model_of_run(run, 0).bit_equal(before)
    assert ensemble_of_run(run, "weight_average").merged.bit_equal(after)

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillseg.dataset import (KitchenEnv, SyntheticKitchenSpec, Trajectory, TrajectoryScaler, generate_synthetic,
                              load_dataset, normalize, read_provenance, save_dataset, train_test_split,
                              transitions_of)
from skillseg.exceptions import DataError, UsageError


@pytest.fixture(scope="module")
def noiseless():
    return generate_synthetic(SyntheticKitchenSpec(noise=0.0), demos_per_task=4, seed=3)


@pytest.fixture(scope="module")
def noisy():
    return generate_synthetic(SyntheticKitchenSpec(), demos_per_task=24, seed=0)


def test_noiseless_boundaries_at_flag_flips(noiseless):
    spec = SyntheticKitchenSpec(noise=0.0)
    for traj in noiseless:
        flags = traj.states[:, 2:]
        for fixture, end in zip(spec.tasks[traj.task], traj.gt_boundaries):
            on = np.flatnonzero(flags[:, fixture] > 0)
            assert on[0] == end - 1  # first flag-on state closes the subtask


def test_benchmark_counts(noisy):
    assert len(noisy) == 72
    assert [sum(t.task == c for t in noisy) for c in range(3)] == [24, 24, 24]
    assert all(len(t.gt_boundaries) == 4 for t in noisy)


def test_gt_segments_partition_trajectory(noisy):
    for traj in noisy:
        segs = traj.gt_segments()
        assert segs[0][0] == 0 and segs[-1][1] == len(traj)
        assert all(a < b for a, b in segs)
        assert all(s1[1] == s2[0] for s1, s2 in zip(segs, segs[1:]))


def test_same_seed_same_file_bytes(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(generate_synthetic(demos_per_task=3, seed=5), a)
    save_dataset(generate_synthetic(demos_per_task=3, seed=5), b)
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.jsonl"
    save_dataset(generate_synthetic(demos_per_task=3, seed=6), c)
    assert a.read_bytes() != c.read_bytes()


def test_intrinsic_and_extrinsic_fixtures():
    spec = SyntheticKitchenSpec()
    assert spec.intrinsic_fixtures() == [0, 1, 2]
    assert spec.extrinsic_fixtures() == [3, 4, 5]
    for f in spec.extrinsic_fixtures():
        assert sum(f in prog for prog in spec.tasks) == 1
    for f in spec.intrinsic_fixtures():
        assert sum(f in prog for prog in spec.tasks) >= 2


def test_spec_rejects_bad_programs():
    with pytest.raises(UsageError):
        SyntheticKitchenSpec(tasks=[[0, 1, 2, 3], [0, 1, 2, 3, 4]])


def test_env_toggle_needs_dwell():
    spec = SyntheticKitchenSpec()
    env = KitchenEnv(spec)
    env.reset(spec.positions[0])
    env.step(np.zeros(2))
    env.step(np.zeros(2))
    assert env.flags[0] == 0
    env.step(np.zeros(2))
    assert env.flags[0] == 1
    env.step(np.array([0.5, 0.0]))
    assert env.flags[0] == 1  # flags latch


# file format --------------------------------------------------------------------------

def test_empty_dataset_round_trip(tmp_path):
    path = tmp_path / "empty.jsonl"
    save_dataset([], path)
    assert load_dataset(path) == []


def test_missing_actions_reports_record(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = {"task": 0, "states": [[0.0], [1.0]], "actions": [[0.0], [0.0]]}
    bad = {"task": 0, "states": [[0.0], [1.0]]}
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(DataError) as info:
        load_dataset(path)
    assert info.value.record == 1 and "actions" in str(info.value)


def test_inconsistent_dims_rejected(tmp_path):
    path = tmp_path / "bad.jsonl"
    a = {"task": 0, "states": [[0.0], [1.0]], "actions": [[0.0], [0.0]]}
    b = {"task": 1, "states": [[0.0, 1.0], [1.0, 1.0]], "actions": [[0.0], [0.0]]}
    path.write_text(json.dumps(a) + "\n" + json.dumps(b) + "\n")
    with pytest.raises(DataError):
        load_dataset(path)


def test_synthetic_round_trip(tmp_path, noiseless):
    path = tmp_path / "d.jsonl"
    save_dataset(noiseless, path, provenance={"seed": 3})
    back = load_dataset(path)
    assert len(back) == len(noiseless)
    assert all(a.equals(b) for a, b in zip(noiseless, back))
    assert read_provenance(path) == {"seed": 3}


def test_trajectory_validation():
    with pytest.raises(DataError):
        Trajectory(np.zeros((5, 2)), np.zeros((4, 2)), 0)
    with pytest.raises(DataError):
        Trajectory(np.zeros((5, 2)), np.zeros((5, 2)), 0, gt_boundaries=[3, 2, 5])
    with pytest.raises(DataError):
        Trajectory(np.zeros((5, 2)), np.zeros((5, 2)), 0, gt_boundaries=[2, 4])


def test_transitions_layout(noiseless):
    t = noiseless[0]
    x, c = transitions_of([t])
    assert x.shape == (len(t) - 1, 2 * 9 + 2)
    np.testing.assert_array_equal(x[3], np.r_[t.states[3], t.actions[3], t.states[4]])
    assert np.all(c == t.task)


# normalization ---------------------------------------------------------------------

def test_standardized_data_gives_unit_stats():
    rng = np.random.default_rng(0)
    s = rng.normal(size=(500, 3))
    a = rng.normal(size=(500, 2))
    s, a = (s - s.mean(0)) / s.std(0), (a - a.mean(0)) / a.std(0)
    _, stats = normalize([Trajectory(s, a, 0)])
    np.testing.assert_allclose(stats.state_mean, 0, atol=1e-12)
    np.testing.assert_allclose(stats.state_std, 1, atol=1e-12)
    np.testing.assert_allclose(stats.action_std, 1, atol=1e-12)


def test_constant_column_is_floored():
    s = np.c_[np.full(10, 5.0), np.arange(10.0)]
    _, stats = normalize([Trajectory(s, np.ones((10, 1)), 0)])
    assert stats.state_mean[0] == 5.0
    assert stats.state_std[0] == pytest.approx(1e-8)


def test_scaler_fit_on_empty_rejected():
    with pytest.raises(UsageError):
        TrajectoryScaler().fit([])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_normalize_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    data = [Trajectory(rng.normal(3, 2, size=(6, 4)), rng.normal(-1, 5, size=(6, 2)), 0) for _ in range(3)]
    scaler = TrajectoryScaler().fit(data)
    back = scaler.inverse_transform(scaler.transform(data))
    for a, b in zip(data, back):
        np.testing.assert_allclose(a.states, b.states, atol=1e-12)
        np.testing.assert_allclose(a.actions, b.actions, atol=1e-12)


# split ----------------------------------------------------------------------------------

def test_split_is_per_task_80_20(noisy):
    train, test = train_test_split(noisy, 0.2, seed=0)
    assert sorted(train + test) == list(range(72))
    assert [sum(noisy[i].task == c for i in test) for c in range(3)] == [5, 5, 5]
    assert train_test_split(noisy, 0.2, seed=0) == (train, test)

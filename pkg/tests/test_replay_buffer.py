import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dyjr.errors import ConfigError, StorageError
from dyjr.grpo_loss import GroupRollout
from dyjr.policy import Trajectory
from dyjr.replay_buffer import (
    FillSchedule,
    ReplayBuffer,
    RLEPStore,
    attach_replay_advantages,
    sample_without_replacement,
    target_fill_count,
    trajectory_from_json,
    trajectory_to_json,
)
from dyjr.task_env import Query
from oracles import run_buffer_laws

Q = Query(0, 0, 2, 1, 10)


def traj(birth, reward=1, query=Q, token=0):
    return Trajectory(query, [token], [-0.5], reward, birth)


def group(confidence, size, step, query=Q):
    rewards = [1] * confidence + [0] * (size - confidence)
    return GroupRollout.from_trajectories(query, [traj(step, r, query) for r in rewards])


def random_rollouts(rng, n_groups, g, step):
    return [group(int(rng.integers(0, g + 1)), g, step) for _ in range(n_groups)]


# eviction -------------------------------------------------------------------


def test_evict_boundary_examples():
    buf = ReplayBuffer(max_age=8, rollouts_per_step=16)
    buf.entries = [traj(3), traj(4)]
    assert buf.evict_stale(12) == 1
    assert [e.birth_step for e in buf.entries] == [4]
    empty = ReplayBuffer(max_age=8)
    assert empty.evict_stale(100) == 0
    assert len(empty) == 0


def test_evict_preserves_survivor_order():
    buf = ReplayBuffer(max_age=2, rollouts_per_step=16)
    births = [5, 1, 4, 2, 6, 3]
    buf.entries = [traj(b, token=i) for i, b in enumerate(births)]
    buf.evict_stale(6)
    assert [int(e.tokens[0]) for e in buf.entries] == [0, 2, 4]


# fill schedule --------------------------------------------------------------


def test_fill_count_examples():
    sched = FillSchedule()
    assert target_fill_count(sched, 10, 4096) == 820
    assert target_fill_count(sched, 20, 4096) == 820
    assert target_fill_count(sched, 21, 4096) == 205
    flat = FillSchedule(eta_warmup=0.1, eta_steady=0.1)
    assert {target_fill_count(flat, s, 4096) for s in range(1, 60)} == {410}
    # exact products must not round up
    assert target_fill_count(sched, 30, 20) == 1
    assert target_fill_count(sched, 1, 512) == math.ceil(0.2 * 512)


@pytest.mark.parametrize(
    "kwargs", [dict(eta_steady=0.0), dict(eta_warmup=0.01), dict(eta_warmup=1.5), dict(warmup_steps=-1)]
)
def test_fill_schedule_validation(kwargs):
    with pytest.raises(ConfigError):
        FillSchedule(**kwargs)


def test_fill_count_rejects_empty_step():
    with pytest.raises(ConfigError):
        target_fill_count(FillSchedule(), 1, 0)


# admission ------------------------------------------------------------------


def test_admission_quota_example():
    # N = 80 at eta 0.05 gives quota 4; stratum C=3 holds 3 correct, stratum C=2 holds 6
    buf = ReplayBuffer(max_age=8, rollouts_per_step=80, schedule=FillSchedule(0, 0.05, 0.05))
    top = group(3, 8, 1)
    mids = [group(2, 8, 1) for _ in range(3)]
    admitted = buf.admit([*mids, top], 1, np.random.default_rng(0))
    assert len(admitted) == 4
    assert sorted(map(id, admitted[:3])) == sorted(id(t) for t in top.trajectories if t.reward == 1)
    assert admitted[3].reward == 1
    assert any(admitted[3] is t for m in mids for t in m.trajectories)
    assert buf.entries == admitted


def test_admission_starved_and_exhausted():
    buf = ReplayBuffer(max_age=8, rollouts_per_step=512)
    assert buf.admit([group(0, 8, 1)] * 5, 1, np.random.default_rng(0)) == []
    small = [group(3, 8, 1), group(1, 8, 1)]
    admitted = buf.admit(small, 1, np.random.default_rng(0))
    assert len(admitted) == 4
    assert all(t.reward == 1 for t in buf.entries)


def test_partial_stratum_choice_is_uniform():
    # quota 1 drawn from one stratum of 5 correct trajectories
    sched = FillSchedule(0, 0.05, 0.05)
    g = group(5, 8, 1)
    correct = [t for t in g.trajectories if t.reward == 1]
    counts = np.zeros(5)
    rng = np.random.default_rng(123)
    for _ in range(5000):
        buf = ReplayBuffer(max_age=8, rollouts_per_step=20, schedule=sched)
        (chosen,) = buf.admit([g], 1, rng)
        counts[correct.index(chosen)] += 1
    assert stats.chisquare(counts).pvalue > 0.001


# sampling -------------------------------------------------------------------


def test_sample_examples():
    rng = np.random.default_rng(0)
    entries = [traj(1, token=i) for i in range(3)]
    assert sample_without_replacement(entries, 512, rng) == entries
    assert sample_without_replacement([], 4, rng) == []
    batch = sample_without_replacement([traj(1, token=i) for i in range(10)], 4, rng)
    assert len({int(t.tokens[0]) for t in batch}) == 4


def test_sample_subsets_equiprobable():
    from itertools import combinations

    entries = [traj(1, token=i) for i in range(10)]
    index = {frozenset(c): i for i, c in enumerate(combinations(range(10), 4))}
    counts = np.zeros(len(index))
    rng = np.random.default_rng(7)
    for _ in range(10_000):
        batch = sample_without_replacement(entries, 4, rng)
        counts[index[frozenset(int(t.tokens[0]) for t in batch)]] += 1
    assert stats.chisquare(counts).pvalue > 0.001


def test_sampled_entries_are_immutable():
    entries = [traj(1)]
    (t,) = sample_without_replacement(entries, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        t.tokens[0] = 1


# buffer laws ----------------------------------------------------------------


def test_buffer_laws_long_run():
    run_buffer_laws(np.random.default_rng(2024), 10_000, 12, 8, 8, FillSchedule(20, 0.2, 0.05))


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    n_groups=st.integers(1, 10),
    g=st.integers(2, 8),
    max_age=st.integers(0, 6),
    warmup=st.integers(0, 10),
    eta=st.tuples(st.floats(0.01, 1.0), st.floats(0.01, 1.0)).map(sorted),
)
def test_buffer_laws_random_configs(seed, n_groups, g, max_age, warmup, eta):
    sched = FillSchedule(warmup, eta[1], eta[0])
    run_buffer_laws(np.random.default_rng(seed), 60, n_groups, g, max_age, sched)


def test_steady_state_capacity_matches_bounded_size():
    buf = ReplayBuffer(max_age=8, rollouts_per_step=4096)
    assert buf.capacity(100) == 1640
    assert abs(buf.capacity(100) - 4096 * 0.05 * 8) < 2
    # elevated warm-up capacity
    assert buf.capacity(8) == 8 * 820


def test_buffer_saturates_at_capacity():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(max_age=8, rollouts_per_step=4096)
    for step in range(1, 40):
        buf.maintain([group(8, 8, step) for _ in range(512)], step, rng)
    assert len(buf) == 1640


# serialisation and the comparison store --------------------------------------


def test_buffer_json_roundtrip():
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(max_age=3, rollouts_per_step=40)
    for step in range(1, 6):
        buf.maintain(random_rollouts(rng, 5, 8, step), step, rng)
    clone = ReplayBuffer(max_age=3, rollouts_per_step=40)
    clone.load_json(buf.to_json())
    assert [trajectory_to_json(e) for e in clone.entries] == [trajectory_to_json(e) for e in buf.entries]


def test_trajectory_from_json_rejects_garbage():
    with pytest.raises(StorageError):
        trajectory_from_json({"query": [0, 0, 2, 1, 10]})


def test_rlep_store_keeps_two_per_query_forever():
    store = RLEPStore(per_query=2)
    other = Query(1, 1, 3, 1, 10)
    for step in range(1, 20):
        store.maintain([group(5, 8, step), group(2, 8, step, other)], step, np.random.default_rng(0))
    assert len(store) == 4
    assert sorted(e.birth_step for e in store.entries) == [1, 1, 1, 1]
    clone = RLEPStore()
    clone.load_json(store.to_json())
    assert len(clone) == 4
    assert clone.maintain([group(8, 8, 30)], 30, np.random.default_rng(0)) == (0, 0)


def test_replay_advantages_come_from_merged_group():
    g = group(2, 8, 1)
    attach_replay_advantages([g])
    merged = np.array([1, 1, 0, 0, 0, 0, 0, 0, 1], dtype=float)
    expected = (1 - merged.mean()) / merged.std()
    for t in g.trajectories:
        assert t.advantage == (pytest.approx(expected) if t.reward else 0.0)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from almdp.envs import random_mdp
from almdp.mdp_core import (
    Policy,
    TabularMDP,
    TransitionTuple,
    bellman_operator,
    discounted_return,
    load_mdp,
    multi_step_compress,
    rollout,
    sample_transition,
    save_mdp,
)


def test_construction_validates_rows():
    P = np.ones((2, 1, 2)) * 0.5
    bad = P.copy()
    bad[0, 0, 0] = 0.6  # row sums to 1.1
    with pytest.raises(ValueError, match="sum to 1"):
        TabularMDP(transition=bad, reward=np.zeros((2, 1)), rho0=np.array([1.0, 0.0]), gamma=0.9)
    with pytest.raises(ValueError, match="gamma"):
        TabularMDP(transition=P, reward=np.zeros((2, 1)), rho0=np.array([1.0, 0.0]), gamma=1.0)
    with pytest.raises(ValueError, match="rho0"):
        TabularMDP(transition=P, reward=np.zeros((2, 1)), rho0=np.array([0.7, 0.7]), gamma=0.9)


def test_bellman_single_state(one_state_mdp):
    assert bellman_operator(one_state_mdp, np.array([0.0])) == pytest.approx(1.0)
    # fixed point of the geometric series
    assert bellman_operator(one_state_mdp, np.array([2.0])) == pytest.approx(2.0)


def test_bellman_shape_error(one_state_mdp):
    with pytest.raises(ValueError, match="shape"):
        bellman_operator(one_state_mdp, np.zeros(3))


def test_bellman_contraction(rng):
    for _ in range(100):
        mdp = random_mdp(4, 2, 0.9, rng)
        V1 = rng.normal(size=4)
        V2 = rng.normal(size=4)
        lhs = np.max(np.abs(bellman_operator(mdp, V1) - bellman_operator(mdp, V2)))
        assert lhs <= mdp.gamma * np.max(np.abs(V1 - V2)) + 1e-12


def test_sample_transition_point_mass(rng):
    P = np.zeros((3, 1, 3))
    P[:, 0, 2] = 1.0
    mdp = TabularMDP(transition=P, reward=np.arange(3.0).reshape(3, 1), rho0=np.array([1.0, 0, 0]), gamma=0.5)
    for s in range(3):
        s_next, r = sample_transition(mdp, s, 0, rng)
        assert s_next == 2
        assert r == float(mdp.reward[s, 0])


def test_sample_transition_frequencies(rng):
    P = np.full((2, 1, 2), 0.5)
    mdp = TabularMDP(transition=P, reward=np.zeros((2, 1)), rho0=np.array([1.0, 0.0]), gamma=0.5)
    n = 100_000
    draws = np.array([sample_transition(mdp, 0, 0, rng)[0] for _ in range(n)])
    freq = draws.mean()
    sigma = np.sqrt(0.25 / n)
    assert abs(freq - 0.5) < 3 * sigma


def test_sampling_consistency_whole_tensor(rng):
    mdp = random_mdp(3, 2, 0.9, rng)
    n = 100_000
    for s in range(3):
        for a in range(2):
            nxt = rng.choice(3, size=n, p=mdp.transition[s, a])
            emp = np.bincount(nxt, minlength=3) / n
            sigma = np.sqrt(mdp.transition[s, a] * (1 - mdp.transition[s, a]) / n)
            assert np.all(np.abs(emp - mdp.transition[s, a]) <= 4 * sigma + 1e-9)


def test_rollout_basic(rng, mdp4):
    policy = Policy(np.full((4, 3), 1.0 / 3.0))
    traj, s0 = rollout(mdp4, policy, 1, rng)
    assert len(traj) == 1
    assert traj[0].s == s0


def test_rollout_deterministic_mdp():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 0] = 1.0
    mdp = TabularMDP(transition=P, reward=np.ones((2, 1)), rho0=np.array([1.0, 0.0]), gamma=0.5)
    policy = Policy(np.ones((2, 1)))
    t1, _ = rollout(mdp, policy, 5, np.random.default_rng(1))
    t2, _ = rollout(mdp, policy, 5, np.random.default_rng(99))
    assert [(t.s, t.a, t.s_next) for t in t1] == [(t.s, t.a, t.s_next) for t in t2]


def test_rollout_chained_and_return(rng, mdp4):
    policy = Policy(np.full((4, 3), 1.0 / 3.0))
    traj, _ = rollout(mdp4, policy, 20, rng)
    for i in range(19):
        assert traj[i].s_next == traj[i + 1].s
    manual = sum(mdp4.gamma**t * mdp4.reward[tt.s, tt.a] for t, tt in enumerate(traj))
    assert discounted_return(traj, mdp4.gamma) == pytest.approx(manual)


def _chained(rewards):
    return [
        TransitionTuple(s=i, a=0, r=float(r), s_next=i + 1) for i, r in enumerate(rewards)
    ]


def test_multi_step_identity():
    traj = _chained([1.0, 2.0, 3.0])
    out = multi_step_compress(traj, 1, 0.5)
    assert [(t.s, t.a, t.r, t.s_next, t.steps) for t in out] == [
        (t.s, t.a, t.r, t.s_next, 1) for t in traj
    ]


def test_multi_step_example():
    traj = _chained([1.0, 2.0])
    out = multi_step_compress(traj, 2, 0.5)
    assert out[0].r == pytest.approx(2.0)  # 1 + 0.5*2
    assert out[0].s_next == 2
    assert out[0].steps == 2


def test_multi_step_truncation():
    traj = _chained([1.0, 1.0, 1.0, 1.0, 1.0])
    out = multi_step_compress(traj, 3, 0.9)
    assert len(out) == 5
    assert [t.steps for t in out] == [3, 3, 3, 2, 1]
    assert out[3].r == pytest.approx(1 + 0.9)
    assert out[4].r == pytest.approx(1.0)
    assert all(t.s_next == 5 for t in out[2:])


def test_multi_step_empty():
    assert multi_step_compress([], 3, 0.9) == []


@settings(max_examples=50, deadline=None)
@given(
    rewards=st.lists(st.floats(-5, 5), min_size=1, max_size=12),
    l=st.integers(1, 5),
    gamma=st.floats(0.1, 0.99),
)
def test_multi_step_reward_matches_manual_sum(rewards, l, gamma):
    traj = _chained(rewards)
    out = multi_step_compress(traj, l, gamma)
    for i, tt in enumerate(out):
        steps = min(l, len(rewards) - i)
        expect = sum(gamma**j * rewards[i + j] for j in range(steps))
        assert tt.r == pytest.approx(expect, abs=1e-12)
        assert tt.steps == steps


def test_transition_tuple_validation():
    with pytest.raises(ValueError):
        TransitionTuple(s=0, a=0, r=0.0, s_next=0, priority=-1.0)
    with pytest.raises(ValueError):
        TransitionTuple(s=0, a=0, r=0.0, s_next=0, steps=0)


def test_mdp_serialization_roundtrip(tmp_path, mdp4):
    path = tmp_path / "m.mdp"
    save_mdp(mdp4, str(path))
    back = load_mdp(str(path))
    assert back.gamma == mdp4.gamma
    np.testing.assert_array_equal(back.transition, mdp4.transition)
    np.testing.assert_array_equal(back.reward, mdp4.reward)
    np.testing.assert_array_equal(back.rho0, mdp4.rho0)

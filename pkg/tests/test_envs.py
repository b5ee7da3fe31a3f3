import numpy as np
import pytest

from almdp.envs import InventoryConfig, chain_mdp, inventory_step, inventory_tabular, random_mdp, truncated_poisson
from almdp.lp_oracle import value_iteration


def test_inventory_step_hand_example():
    cfg = InventoryConfig(M=10, K=5, c=2, h_cost=2, p=3, demand_lambda=2.0, gamma=0.9)
    nxt, r = inventory_step(cfg, s=5, a=3, d=2)
    assert nxt == 6
    assert r == pytest.approx(-15.0)  # -5 - 6 - 10 + 6


def test_inventory_step_idle():
    cfg = InventoryConfig()
    for d in (0, 3, 100):
        nxt, r = inventory_step(cfg, 0, 0, d)
        assert nxt == 0 and r == 0.0


def test_inventory_step_holding_only():
    cfg = InventoryConfig()
    nxt, r = inventory_step(cfg, 4, 0, 0)
    assert nxt == 4
    assert r == pytest.approx(-8.0)


def test_inventory_step_bounds():
    cfg = InventoryConfig(M=5)
    with pytest.raises(ValueError):
        inventory_step(cfg, 6, 0, 0)
    with pytest.raises(ValueError):
        inventory_step(cfg, 0, 6, 0)
    for s in range(6):
        for a in range(6):
            for d in (0, 2, 11):
                nxt, _ = inventory_step(cfg, s, a, d)
                assert 0 <= nxt <= cfg.M


def test_inventory_config_validation():
    with pytest.raises(ValueError, match="selling price"):
        InventoryConfig(p=1.0, h_cost=2.0)
    with pytest.raises(ValueError):
        InventoryConfig(M=0)


def test_truncated_poisson_head_value():
    pmf = truncated_poisson(8.0, 30)
    assert pmf[0] == pytest.approx(np.exp(-8.0), rel=1e-10)
    assert pmf.sum() == pytest.approx(1.0, abs=1e-12)


def test_truncated_poisson_degenerate():
    pmf = truncated_poisson(1e-9, 5)
    assert pmf[0] == pytest.approx(1.0, abs=1e-8)


def test_truncated_poisson_sums_to_one():
    for lam in (0.3, 2.0, 8.0, 20.0):
        assert truncated_poisson(lam, 10).sum() == pytest.approx(1.0, abs=1e-12)


def test_inventory_tabular_rows_stochastic():
    mdp = inventory_tabular(InventoryConfig(M=6, demand_lambda=2.0))
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
    assert mdp.n_states == 7 and mdp.n_actions == 7


def test_inventory_tabular_zero_demand_deterministic():
    mdp = inventory_tabular(InventoryConfig(M=2, demand_lambda=1e-9))
    for s in range(3):
        for a in range(3):
            nxt = min(s + a, 2)
            assert mdp.transition[s, a, nxt] == pytest.approx(1.0, abs=1e-8)


def test_inventory_expected_reward_monte_carlo(rng):
    cfg = InventoryConfig(M=6, demand_lambda=2.0)
    mdp = inventory_tabular(cfg)
    n = 1_000_000
    for s, a in [(0, 3), (4, 0), (2, 5)]:
        d = np.minimum(rng.poisson(cfg.demand_lambda, size=n), cfg.M)
        stocked = min(s + a, cfg.M)
        nxt = np.maximum(stocked - d, 0)
        r = -cfg.K * (a > 0) - cfg.c * max(stocked - s, 0) - cfg.h_cost * s + cfg.p * (stocked - nxt)
        sigma = r.std(ddof=1) / np.sqrt(n)
        assert abs(r.mean() - mdp.reward[s, a]) <= 3 * sigma + 1e-9


def test_inventory_idle_policy_zero_return():
    mdp = inventory_tabular(InventoryConfig(M=4))
    # from s=0 with a=0 forever the reward is identically 0
    assert mdp.reward[0, 0] == 0.0
    assert mdp.transition[0, 0, 0] == pytest.approx(1.0)


def test_chain_deterministic():
    mdp = chain_mdp(4, 0.9, 0.0)
    assert np.all((mdp.transition == 0) | (mdp.transition == 1))


def test_chain_goal_adjacent_value():
    mdp = chain_mdp(2, 0.5, 0.0)
    V = value_iteration(mdp, tol=1e-12)
    # unit reward on entering the right end: both states collect from the next step on
    assert V[1] == pytest.approx(1.0 / (1.0 - 0.5), abs=1e-9)
    assert V[0] == pytest.approx(1.0 / (1.0 - 0.5), abs=1e-9)


def test_chain_value_ordering():
    mdp = chain_mdp(6, 0.9, 0.0)
    V = value_iteration(mdp, tol=1e-12)
    assert np.all(np.diff(V) >= -1e-12)  # closer to the goal is worth more


def test_chain_half_noise_symmetric():
    mdp = chain_mdp(2, 0.5, 0.5)
    np.testing.assert_allclose(mdp.transition[0, 0], [0.5, 0.5])
    np.testing.assert_allclose(mdp.transition[0, 1], [0.5, 0.5])


def test_chain_validation():
    with pytest.raises(ValueError):
        chain_mdp(1, 0.9, 0.0)
    with pytest.raises(ValueError):
        chain_mdp(3, 0.9, 1.0)


def test_random_mdp_valid(rng):
    mdp = random_mdp(5, 3, 0.95, rng)
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
    assert mdp.rho0.sum() == pytest.approx(1.0, abs=1e-12)

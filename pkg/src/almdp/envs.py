"""Concrete environments: inventory control, chain diagnostics, random MDPs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .mdp_core import TabularMDP


@dataclass
class InventoryConfig:
    """Day-to-day inventory control with Poisson demand.

    M = max inventory, K = fixed entry cost, c = unit purchase cost,
    h_cost = unit holding cost, p = unit selling price (p > h_cost),
    demand_lambda = Poisson demand mean.
    """

    M: int = 10
    K: float = 5.0
    c: float = 2.0
    h_cost: float = 2.0
    p: float = 3.0
    demand_lambda: float = 2.0
    gamma: float = 0.9

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.p <= self.h_cost:
            raise ValueError("selling price p must exceed holding cost h")
        if self.demand_lambda <= 0:
            raise ValueError("demand_lambda must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if min(self.K, self.c, self.h_cost) < 0:
            raise ValueError("costs must be nonnegative")


def inventory_step(cfg: InventoryConfig, s: int, a: int, d: int) -> tuple[int, float]:
    """One day of inventory dynamics given demand d.

    next = [min(s+a, M) - d]_+
    reward = -K*1{a>0} - c*[min(s+a,M) - s]_+ - h*s + p*[min(s+a,M) - next]_+
    """
    if not 0 <= s <= cfg.M or not 0 <= a <= cfg.M:
        raise ValueError(f"inventory state/action out of range: ({s}, {a})")
    if d < 0:
        raise ValueError("demand must be nonnegative")
    stocked = min(s + a, cfg.M)
    nxt = max(stocked - d, 0)
    reward = (
        -cfg.K * (a > 0)
        - cfg.c * max(stocked - s, 0)
        - cfg.h_cost * s
        + cfg.p * max(stocked - nxt, 0)
    )
    return nxt, float(reward)


def truncated_poisson(lam: float, M: int) -> np.ndarray:
    """Poisson(lam) pmf on {0..M} with the tail mass folded into the M bucket."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    k = np.arange(M + 1)
    pmf = np.exp(-lam + k * np.log(lam) - gammaln(k + 1))
    pmf[M] = max(1.0 - pmf[:M].sum(), 0.0)
    return pmf / pmf.sum()


def inventory_tabular(cfg: InventoryConfig) -> TabularMDP:
    """Exact tabularization over states {0..M}, actions {0..M}, truncated demand."""
    n = cfg.M + 1
    demand = truncated_poisson(cfg.demand_lambda, cfg.M)
    P = np.zeros((n, n, n))
    R = np.zeros((n, n))
    for s in range(n):
        for a in range(n):
            for d, pd in enumerate(demand):
                nxt, r = inventory_step(cfg, s, a, d)
                P[s, a, nxt] += pd
                R[s, a] += pd * r
    rho0 = np.full(n, 1.0 / n)
    return TabularMDP(transition=P, reward=R, rho0=rho0, gamma=cfg.gamma)


def chain_mdp(n: int, gamma: float, noise: float) -> TabularMDP:
    """n-state chain, actions left/right, unit reward on entering the right end.

    With probability `noise` the commanded move is flipped. r(s,a) is the expected
    reward P(next = n-1 | s, a), so the reward table stays a function of (s, a).
    """
    if n < 2:
        raise ValueError("chain needs at least 2 states")
    if not 0.0 <= noise < 1.0:
        raise ValueError("noise must lie in [0, 1)")
    P = np.zeros((n, 2, n))
    for s in range(n):
        left = max(s - 1, 0)
        right = min(s + 1, n - 1)
        P[s, 0, left] += 1.0 - noise
        P[s, 0, right] += noise
        P[s, 1, right] += 1.0 - noise
        P[s, 1, left] += noise
    R = P[:, :, n - 1].copy()
    rho0 = np.full(n, 1.0 / n)
    return TabularMDP(transition=P, reward=R, rho0=rho0, gamma=gamma)


def random_mdp(
    n_states: int,
    n_actions: int,
    gamma: float,
    rng: np.random.Generator,
    reward_scale: float = 1.0,
) -> TabularMDP:
    """Random dense MDP: Dirichlet(1) transition rows, U(0, scale) rewards, Dirichlet rho0.

    Continuous rewards make argmax ties measure-zero, so instances are tie-free.
    """
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    R = rng.uniform(0.0, reward_scale, size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(transition=P, reward=R, rho0=rho0, gamma=gamma)

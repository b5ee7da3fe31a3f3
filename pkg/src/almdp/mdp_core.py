"""Finite discounted MDPs: validation, Bellman machinery, trajectories, multi-step rewards."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STOCHASTIC_ATOL = 1e-12


@dataclass
class TabularMDP:
    """Explicit finite MDP.

    transition[s, a, s'] = P(s'|s,a), reward[s, a] = expected one-step reward,
    rho0 = start distribution, gamma = discount in (0, 1).
    """

    transition: np.ndarray
    reward: np.ndarray
    rho0: np.ndarray
    gamma: float

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.rho0 = np.asarray(self.rho0, dtype=float)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError(f"transition must be (S, A, S), got {self.transition.shape}")
        n_states, n_actions, _ = self.transition.shape
        if self.reward.shape != (n_states, n_actions):
            raise ValueError(f"reward must be {(n_states, n_actions)}, got {self.reward.shape}")
        if self.rho0.shape != (n_states,):
            raise ValueError(f"rho0 must be ({n_states},), got {self.rho0.shape}")
        if np.any(self.transition < 0):
            raise ValueError("transition probabilities must be nonnegative")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > STOCHASTIC_ATOL:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if np.any(self.rho0 < 0) or abs(self.rho0.sum() - 1.0) > STOCHASTIC_ATOL:
            raise ValueError("rho0 must be a probability vector (sum 1 within 1e-12)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass
class TransitionTuple:
    """One experience (s, a, r, s') plus replay bookkeeping."""

    s: int
    a: int
    r: float
    s_next: int
    priority: float = 0.0
    steps: int = 1  # lookahead length; reward is compressed over this many steps

    def __post_init__(self):
        if self.priority < 0:
            raise ValueError("priority must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class Policy:
    """Stochastic policy: probs[s, a] = pi(a|s), rows sum to 1."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise ValueError("policy table must be 2-D (S, A)")
        if np.any(self.probs < 0):
            raise ValueError("policy probabilities must be nonnegative")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > STOCHASTIC_ATOL:
            raise ValueError("policy rows must sum to 1 within 1e-12")

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> "Policy":
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


def bellman_operator(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    """One optimal Bellman backup: (TV)(s) = max_a { r(s,a) + gamma * E[V(s')] }."""
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ValueError(f"V must have shape ({mdp.n_states},), got {V.shape}")
    q = mdp.reward + mdp.gamma * mdp.transition @ V
    return q.max(axis=1)


def sample_transition(mdp: TabularMDP, s: int, a: int, rng: np.random.Generator) -> tuple[int, float]:
    """Draw s' ~ P(.|s,a) and return (s', r(s,a))."""
    if not 0 <= s < mdp.n_states or not 0 <= a < mdp.n_actions:
        raise ValueError(f"state/action indices out of range: ({s}, {a})")
    s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
    return s_next, float(mdp.reward[s, a])


def rollout(
    mdp: TabularMDP, policy: Policy, horizon: int, rng: np.random.Generator
) -> tuple[list[TransitionTuple], int]:
    """Sample a trajectory of `horizon` chained transitions starting from s0 ~ rho0."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    s0 = int(rng.choice(mdp.n_states, p=mdp.rho0))
    s = s0
    traj = []
    for _ in range(horizon):
        a = int(rng.choice(mdp.n_actions, p=policy.probs[s]))
        s_next, r = sample_transition(mdp, s, a, rng)
        traj.append(TransitionTuple(s=s, a=a, r=r, s_next=s_next))
        s = s_next
    return traj, s0


def discounted_return(trajectory: list[TransitionTuple], gamma: float) -> float:
    """Sum of gamma^t * r_t over a trajectory of one-step tuples."""
    return float(sum(gamma**t * tt.r for t, tt in enumerate(trajectory)))


def multi_step_compress(
    trajectory: list[TransitionTuple], l: int, gamma: float
) -> list[TransitionTuple]:
    """Compress one-step rewards into l-step lookahead tuples.

    Output tuple i carries r = sum_{j<l} gamma^j r_{i+j}, s_next = the state l steps
    ahead, and steps = l. Tuples within l of the trajectory end are truncated to the
    remaining horizon, with steps recording the shortened lookahead so targets can
    use gamma^steps * V(s_next).
    """
    if l < 1:
        raise ValueError("lookahead l must be >= 1")
    n = len(trajectory)
    if n == 0:
        return []
    for i in range(n - 1):
        if trajectory[i].s_next != trajectory[i + 1].s:
            raise ValueError(f"trajectory not chained at index {i}")
    out = []
    for i in range(n):
        steps = min(l, n - i)
        r = sum(gamma**j * trajectory[i + j].r for j in range(steps))
        out.append(
            TransitionTuple(
                s=trajectory[i].s,
                a=trajectory[i].a,
                r=float(r),
                s_next=trajectory[i + steps - 1].s_next,
                steps=steps,
            )
        )
    return out


def save_mdp(mdp: TabularMDP, path: str) -> None:
    """Write an MDP as structured text: counts, gamma, then flat row-major arrays."""
    with open(path, "w") as fh:
        fh.write(f"n_states {mdp.n_states}\n")
        fh.write(f"n_actions {mdp.n_actions}\n")
        fh.write(f"gamma {float(mdp.gamma)!r}\n")
        for name, arr in (("reward", mdp.reward), ("transition", mdp.transition), ("rho0", mdp.rho0)):
            flat = " ".join(repr(float(v)) for v in arr.ravel())
            fh.write(f"{name} {flat}\n")


def load_mdp(path: str) -> TabularMDP:
    """Read an MDP written by save_mdp (exact round trip via repr floats)."""
    fields = {}
    with open(path) as fh:
        for line in fh:
            key, _, rest = line.strip().partition(" ")
            fields[key] = rest
    S = int(fields["n_states"])
    A = int(fields["n_actions"])
    gamma = float(fields["gamma"])
    reward = np.fromstring(fields["reward"], sep=" ").reshape(S, A)
    transition = np.fromstring(fields["transition"], sep=" ").reshape(S, A, S)
    rho0 = np.fromstring(fields["rho0"], sep=" ")
    return TabularMDP(transition=transition, reward=reward, rho0=rho0, gamma=gamma)

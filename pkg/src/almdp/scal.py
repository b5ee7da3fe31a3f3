"""Stochastic training loops: replay with proportional sampling, the behavior
policy, the composite quadratic-penalty objective and its per-sample gradient
terms, the SCAL loop, and the deep parameterized ALM variant.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mdp_core import Policy, TabularMDP, TransitionTuple, multi_step_compress, sample_transition
from .nets import (
    NetBundle,
    OptState,
    TwoLayerNet,
    accumulate_grad,
    adam_step,
    all_sa_features,
    clip_local,
    effective_lr,
    forward_batch,
    init_opt,
    make_bundle,
    multiplier_table,
    project_ball,
    sa_features_batch,
    sigmoid,
    softmax,
    softplus,
    state_features_batch,
    sync_target,
    value_table,
)

log = logging.getLogger(__name__)


class BufferNotReady(RuntimeError):
    """Raised when sampling is requested from an empty or degenerate buffer."""


@dataclass
class ScalConfig:
    """Hyperparameters for SCAL / deep-ALM training (Algorithm-2 style loop)."""

    mu: float = 1.0
    beta: float = 1.0
    lr_v: float = 3e-4
    lr_h: float = 3e-4
    lr_x: float = 3e-4
    batch: int = 64
    target_period: int = 100
    total_steps: int = 10_000
    lookahead: int = 1
    epsilon_explore: float = 0.05  # exploration floor after annealing
    ntk_radius: float | None = None
    seed: int = 0
    width: int = 64
    capacity: int = 100_000
    episode_len: int = 10
    eval_period: int = 1000
    eval_horizon: int = 10
    anneal_horizon: int | None = None  # None -> total_steps
    slack_scale: float | None = None  # None -> (1 + max|r|)/(1 - gamma)
    eps_prio: float = 1e-3
    explore_frac: float = 1.0 / 3.0

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.beta <= 1.0 / (4.0 * self.mu):
            raise ValueError(f"beta must exceed 1/(4*mu) = {1.0 / (4.0 * self.mu)}")
        if min(self.lr_v, self.lr_h, self.lr_x) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch < 1 or self.target_period < 1 or self.lookahead < 1:
            raise ValueError("batch, target_period and lookahead must be >= 1")
        if not 0.0 <= self.epsilon_explore <= 1.0:
            raise ValueError("epsilon_explore must lie in [0, 1]")


# ---------------------------------------------------------------------------
# replay buffer


@dataclass
class TransitionBatch:
    """Column view of sampled transitions (all arrays share length)."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    steps: np.ndarray
    priority: np.ndarray
    idx: np.ndarray

    def __len__(self) -> int:
        return len(self.s)

    def tuples(self) -> list[TransitionTuple]:
        return [
            TransitionTuple(int(s), int(a), float(r), int(sn), float(p), int(st))
            for s, a, r, sn, st, p in zip(self.s, self.a, self.r, self.s_next, self.steps, self.priority)
        ]


class ReplayBuffer:
    """Bounded FIFO store of transitions plus a ring of episode-start states."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros(capacity, dtype=np.int64)
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s_next = np.zeros(capacity, dtype=np.int64)
        self.steps = np.ones(capacity, dtype=np.int64)
        self.priority = np.zeros(capacity)
        self.size = 0
        self.pos = 0
        self.init_states = np.zeros(capacity, dtype=np.int64)
        self.init_size = 0
        self.init_pos = 0

    def __len__(self) -> int:
        return self.size

    @property
    def n_initial(self) -> int:
        return self.init_size

    def push(self, tt: TransitionTuple) -> None:
        """Append a transition; evicts the oldest entry when full."""
        i = self.pos
        self.s[i], self.a[i], self.r[i] = tt.s, tt.a, tt.r
        self.s_next[i], self.steps[i] = tt.s_next, tt.steps
        self.priority[i] = tt.priority
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_initial(self, s: int) -> None:
        self.init_states[self.init_pos] = s
        self.init_pos = (self.init_pos + 1) % self.capacity
        self.init_size = min(self.init_size + 1, self.capacity)

    def sample_initial(self, b: int, rng: np.random.Generator) -> np.ndarray:
        if self.init_size == 0:
            raise BufferNotReady("no initial states stored yet")
        return self.init_states[rng.integers(0, self.init_size, size=b)]


def constraint_violation(
    v_net: TwoLayerNet,
    v_target: TwoLayerNet,
    s: np.ndarray,
    r: np.ndarray,
    s_next: np.ndarray,
    steps: np.ndarray,
    gamma: float,
    n_states: int,
) -> np.ndarray:
    """Replay priority: [r + gamma^steps * V_targ(s') - V(s)]_+ per tuple."""
    v_s = forward_batch(v_net, state_features_batch(s, n_states))
    v_n = forward_batch(v_target, state_features_batch(s_next, n_states))
    return np.maximum(0.0, r + gamma**steps.astype(float) * v_n - v_s)


def sample_proportional(
    buffer: ReplayBuffer,
    b: int,
    rng: np.random.Generator,
    v_net: TwoLayerNet,
    v_target: TwoLayerNet,
    gamma: float,
    n_states: int,
    eps_prio: float = 1e-3,
) -> TransitionBatch:
    """Draw b tuples with probability proportional to stored priority + eps_prio,
    then refresh the drawn tuples' priorities with the current networks (lazy)."""
    if buffer.size == 0:
        raise BufferNotReady("replay buffer is empty")
    weights = buffer.priority[: buffer.size] + eps_prio
    total = weights.sum()
    if total <= 0:
        raise BufferNotReady("all priorities are zero and eps_prio leaves no mass")
    idx = rng.choice(buffer.size, size=b, p=weights / total)
    fresh = constraint_violation(
        v_net, v_target, buffer.s[idx], buffer.r[idx], buffer.s_next[idx],
        buffer.steps[idx], gamma, n_states,
    )
    buffer.priority[idx] = fresh
    return TransitionBatch(
        s=buffer.s[idx].copy(),
        a=buffer.a[idx].copy(),
        r=buffer.r[idx].copy(),
        s_next=buffer.s_next[idx].copy(),
        steps=buffer.steps[idx].copy(),
        priority=fresh,
        idx=idx,
    )


def behavior_action(bundle: NetBundle, s: int, epsilon_explore: float, rng: np.random.Generator) -> int:
    """Sample from the softmax multiplier head with epsilon-uniform mixing."""
    if rng.random() < epsilon_explore:
        return int(rng.integers(0, bundle.n_actions))
    feats = sa_features_batch(
        np.full(bundle.n_actions, s), np.arange(bundle.n_actions), bundle.n_states, bundle.n_actions
    )
    probs = softmax(forward_batch(bundle.x_net, feats))
    return int(rng.choice(bundle.n_actions, p=probs))


def greedy_policy_from_bundle(bundle: NetBundle) -> Policy:
    """Deterministic argmax of the softmax action head, per state."""
    logits = forward_batch(bundle.x_net, all_sa_features(bundle.n_states, bundle.n_actions))
    actions = logits.reshape(bundle.n_states, bundle.n_actions).argmax(axis=1)
    return Policy.deterministic(actions, bundle.n_actions)


# ---------------------------------------------------------------------------
# composite objective and its gradient terms


def penalty_scalars(z_targ: np.ndarray, x_live: np.ndarray, mu: float, beta: float):
    """Per-sample scalars of the update rule.

    e = beta*(z_targ - x); the value-head carries coefficient -(x + mu e) on
    grad V(s); the slack head carries (x + mu e); the multiplier head carries
    (z_targ - mu e)/mu.
    """
    e = beta * (z_targ - x_live)
    v_coef = -(x_live + mu * e)
    q_coef = x_live + mu * e
    m_coef = (z_targ - mu * e) / mu
    return e, v_coef, q_coef, m_coef


@dataclass
class _BatchEval:
    """Forward quantities shared by the objective and the gradient terms."""

    v_s: np.ndarray
    v0: np.ndarray
    h: np.ndarray
    h_raw: np.ndarray
    x: np.ndarray
    x1: np.ndarray
    probs: np.ndarray  # (b, A) live softmax rows
    x1_raw: np.ndarray
    z_targ: np.ndarray
    disc: np.ndarray
    sa_feats: np.ndarray
    sa_feats_all: np.ndarray  # (b*A, d_sa) features for every action at each sampled state
    s_feats: np.ndarray
    s0_feats: np.ndarray


def _evaluate_batch(batch: TransitionBatch, init_states: np.ndarray, bundle: NetBundle,
                    mu: float, gamma: float) -> _BatchEval:
    S, A = bundle.n_states, bundle.n_actions
    b = len(batch)
    s_feats = state_features_batch(batch.s, S)
    sn_feats = state_features_batch(batch.s_next, S)
    s0_feats = state_features_batch(init_states, S)
    sa_feats = sa_features_batch(batch.s, batch.a, S, A)
    rep_s = np.repeat(batch.s, A)
    rep_a = np.tile(np.arange(A), b)
    sa_feats_all = sa_features_batch(rep_s, rep_a, S, A)

    v_s = forward_batch(bundle.v_net, s_feats)
    v0 = forward_batch(bundle.v_net, s0_feats)
    v_n_targ = forward_batch(bundle.v_target, sn_feats)

    h_raw = forward_batch(bundle.h_net, sa_feats)
    h = bundle.slack_scale * sigmoid(h_raw)

    x1_raw = forward_batch(bundle.x_state_head, s_feats)
    x1 = softplus(x1_raw)
    logits = forward_batch(bundle.x_net, sa_feats_all).reshape(b, A)
    probs = softmax(logits)
    x = x1 * probs[np.arange(b), batch.a]

    x1_t = softplus(forward_batch(bundle.x_state_target, s_feats))
    logits_t = forward_batch(bundle.x_target, sa_feats_all).reshape(b, A)
    probs_t = softmax(logits_t)
    x_t = x1_t * probs_t[np.arange(b), batch.a]

    disc = gamma ** batch.steps.astype(float)
    z_targ = x_t + mu * (h + batch.r + disc * v_n_targ - v_s)
    return _BatchEval(
        v_s=v_s, v0=v0, h=h, h_raw=h_raw, x=x, x1=x1, probs=probs, x1_raw=x1_raw,
        z_targ=z_targ, disc=disc, sa_feats=sa_feats, sa_feats_all=sa_feats_all,
        s_feats=s_feats, s0_feats=s0_feats,
    )


def composite_objective_value(
    batch: TransitionBatch, init_states: np.ndarray, bundle: NetBundle, cfg: ScalConfig, gamma: float
) -> float:
    """(1/b) sum V(s0) + (1/mu b) sum x z_targ + (beta/2b) sum (x - z_targ)^2."""
    ev = _evaluate_batch(batch, init_states, bundle, cfg.mu, gamma)
    b = len(batch)
    return float(
        ev.v0.mean()
        + (ev.x * ev.z_targ).sum() / (cfg.mu * b)
        + 0.5 * cfg.beta * ((ev.x - ev.z_targ) ** 2).sum() / b
    )


@dataclass
class GradTerms:
    """Per-sample gradient terms of the composite objective (test/ablation path)."""

    e: np.ndarray
    g: np.ndarray  # (b, m, d_s) value-head terms
    q: np.ndarray  # (b, m, d_sa) slack-head terms
    m_state: np.ndarray  # (b, m, d_s) multiplier state-head terms
    m_logits: np.ndarray  # (b, m, d_sa) multiplier action-head terms


def _per_sample_grads(net: TwoLayerNet, X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    active = (X @ net.weights.T) >= 0.0  # (n, m)
    return net.scale * np.einsum("m,nm,n,nd->nmd", net.out_sign, active, coef, X)


def composite_grad_terms(
    batch: TransitionBatch, init_states: np.ndarray, bundle: NetBundle, cfg: ScalConfig, gamma: float
) -> GradTerms:
    ev = _evaluate_batch(batch, init_states, bundle, cfg.mu, gamma)
    b, A = len(batch), bundle.n_actions
    e, v_coef, q_coef, m_coef = penalty_scalars(ev.z_targ, ev.x, cfg.mu, cfg.beta)

    g = _per_sample_grads(bundle.v_net, ev.s0_feats, np.ones(b)) + _per_sample_grads(
        bundle.v_net, ev.s_feats, v_coef
    )
    q = _per_sample_grads(bundle.h_net, ev.sa_feats,
                          q_coef * bundle.slack_scale * _sigmoid_deriv(ev.h_raw))
    m_state = _per_sample_grads(
        bundle.x_state_head, ev.s_feats,
        m_coef * ev.probs[np.arange(b), batch.a] * sigmoid(ev.x1_raw),
    )
    # d x(s,a) / d logit(s,a') = x1 * p_a (delta_{aa'} - p_a')
    p_a = ev.probs[np.arange(b), batch.a]
    dlogit = -ev.probs * p_a[:, None]
    dlogit[np.arange(b), batch.a] += p_a
    coefs = (m_coef * ev.x1)[:, None] * dlogit  # (b, A)
    per_pair = _per_sample_grads(bundle.x_net, ev.sa_feats_all, coefs.ravel())
    m_logits = per_pair.reshape(b, A, *per_pair.shape[1:]).sum(axis=1)
    return GradTerms(e=e, g=g, q=q, m_state=m_state, m_logits=m_logits)


def _sigmoid_deriv(raw: np.ndarray) -> np.ndarray:
    sg = sigmoid(raw)
    return sg * (1.0 - sg)


def composite_grad_means(
    batch: TransitionBatch, init_states: np.ndarray, bundle: NetBundle, cfg: ScalConfig, gamma: float
):
    """Batch-mean gradients per head plus the scalars needed for logging."""
    ev = _evaluate_batch(batch, init_states, bundle, cfg.mu, gamma)
    b, A = len(batch), bundle.n_actions
    e, v_coef, q_coef, m_coef = penalty_scalars(ev.z_targ, ev.x, cfg.mu, cfg.beta)

    gv = (
        accumulate_grad(bundle.v_net, ev.s0_feats, np.ones(b))
        + accumulate_grad(bundle.v_net, ev.s_feats, v_coef)
    ) / b
    gh = accumulate_grad(
        bundle.h_net, ev.sa_feats, q_coef * bundle.slack_scale * _sigmoid_deriv(ev.h_raw)
    ) / b
    p_a = ev.probs[np.arange(b), batch.a]
    gx_state = accumulate_grad(
        bundle.x_state_head, ev.s_feats, m_coef * p_a * sigmoid(ev.x1_raw)
    ) / b
    dlogit = -ev.probs * p_a[:, None]
    dlogit[np.arange(b), batch.a] += p_a
    coefs = (m_coef * ev.x1)[:, None] * dlogit
    gx_logits = accumulate_grad(bundle.x_net, ev.sa_feats_all, coefs.ravel()) / b

    grads = {"v": gv, "h": gh, "x_state": gx_state, "x_logits": gx_logits}
    objective = float(
        ev.v0.mean()
        + (ev.x * ev.z_targ).sum() / (cfg.mu * b)
        + 0.5 * cfg.beta * ((ev.x - ev.z_targ) ** 2).sum() / b
    )
    stats = {
        "objective": objective,
        "penalty_residual": float((e * e).mean()),
        "mass_estimate": float(ev.x.mean()),
    }
    return grads, stats


# ---------------------------------------------------------------------------
# training loops


@dataclass
class LogRow:
    step: int
    window_return: float
    objective: float
    penalty_residual: float
    mass_estimate: float
    lr: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    bundle: NetBundle | None = None


def explore_epsilon(step: int, cfg: ScalConfig) -> float:
    """Linear anneal 1.0 -> epsilon_explore over the first explore_frac of training."""
    horizon = max(1, int(cfg.explore_frac * cfg.total_steps))
    frac = min(1.0, step / horizon)
    return 1.0 + frac * (cfg.epsilon_explore - 1.0)


def default_slack_scale(env: TabularMDP) -> float:
    """Upper bound on any feasible slack: (1 + max|r|) / (1 - gamma)."""
    return float((1.0 + np.abs(env.reward).max()) / (1.0 - env.gamma))


def _make_opts(bundle: NetBundle, cfg: ScalConfig) -> dict[str, OptState]:
    horizon = cfg.anneal_horizon if cfg.anneal_horizon is not None else max(cfg.total_steps, 1)
    return {
        "v": init_opt(bundle.v_net, cfg.lr_v, horizon),
        "h": init_opt(bundle.h_net, cfg.lr_h, horizon),
        "x_state": init_opt(bundle.x_state_head, cfg.lr_x, horizon),
        "x_logits": init_opt(bundle.x_net, cfg.lr_x, horizon),
    }


def scal_step(
    buffer: ReplayBuffer,
    bundle: NetBundle,
    opts: dict[str, OptState],
    cfg: ScalConfig,
    step_index: int,
    rng: np.random.Generator,
    gamma: float,
) -> dict[str, float]:
    """One Jacobi update of all heads from a proportional batch; returns log scalars."""
    if buffer.size < cfg.batch or buffer.n_initial < cfg.batch:
        raise BufferNotReady(
            f"need >= {cfg.batch} transitions and initial states, have "
            f"{buffer.size}/{buffer.n_initial}"
        )
    batch = sample_proportional(
        buffer, cfg.batch, rng, bundle.v_net, bundle.v_target, gamma, bundle.n_states, cfg.eps_prio
    )
    init_states = buffer.sample_initial(cfg.batch, rng)
    grads, stats = composite_grad_means(batch, init_states, bundle, cfg, gamma)
    clipped = clip_local(grads)
    bundle.v_net.weights = adam_step(opts["v"], bundle.v_net.weights, clipped["v"])
    bundle.h_net.weights = adam_step(opts["h"], bundle.h_net.weights, clipped["h"])
    bundle.x_state_head.weights = adam_step(opts["x_state"], bundle.x_state_head.weights, clipped["x_state"])
    bundle.x_net.weights = adam_step(opts["x_logits"], bundle.x_net.weights, clipped["x_logits"])
    if cfg.ntk_radius is not None:
        for net in (bundle.v_net, bundle.h_net, bundle.x_state_head, bundle.x_net):
            project_ball(net, cfg.ntk_radius)
    if step_index % cfg.target_period == 0:
        sync_target(bundle)
    stats["max_clipped_norm"] = max(
        float(np.sqrt(np.sum(g * g))) for g in clipped.values()
    )
    return stats


def _interact(env, bundle, cfg, rng, buffer, state, episode, step):
    """One environment step; flushes the episode into the buffer when it ends."""
    eps = explore_epsilon(step, cfg)
    a = behavior_action(bundle, state, eps, rng)
    s_next, r = sample_transition(env, state, a, rng)
    episode.append(TransitionTuple(s=state, a=a, r=r, s_next=s_next))
    state = s_next
    if len(episode) >= cfg.episode_len:
        compressed = multi_step_compress(episode, cfg.lookahead, env.gamma)
        prios = constraint_violation(
            bundle.v_net, bundle.v_target,
            np.array([t.s for t in compressed]),
            np.array([t.r for t in compressed]),
            np.array([t.s_next for t in compressed]),
            np.array([t.steps for t in compressed]),
            env.gamma, bundle.n_states,
        )
        for tt, p in zip(compressed, prios):
            tt.priority = float(p)
            buffer.push(tt)
        episode.clear()
        state = int(rng.choice(env.n_states, p=env.rho0))
        buffer.push_initial(state)
    return state


def scal_train(env: TabularMDP, cfg: ScalConfig, hook=None) -> TrainLog:
    """Algorithm-2 loop: one environment interaction and one composite update per step.

    Logs one row per eval_period: exact greedy-policy return over the evaluation
    window, the sampled composite objective, the mean squared penalty residual,
    and the batch multiplier-mass estimate.
    """
    from .lp_oracle import finite_window_return

    rng = np.random.default_rng(cfg.seed)
    slack = cfg.slack_scale if cfg.slack_scale is not None else default_slack_scale(env)
    bundle = make_bundle(env.n_states, env.n_actions, cfg.width, rng, slack)
    opts = _make_opts(bundle, cfg)
    buffer = ReplayBuffer(cfg.capacity)
    train_log = TrainLog(bundle=bundle)
    if cfg.total_steps == 0:
        return train_log
    state = int(rng.choice(env.n_states, p=env.rho0))
    buffer.push_initial(state)
    episode: list[TransitionTuple] = []
    last_stats = {"objective": 0.0, "penalty_residual": 0.0, "mass_estimate": 0.0}
    for step in range(cfg.total_steps):
        state = _interact(env, bundle, cfg, rng, buffer, state, episode, step)
        if buffer.size >= cfg.batch and buffer.n_initial >= cfg.batch:
            last_stats = scal_step(buffer, bundle, opts, cfg, step, rng, env.gamma)
        if (step + 1) % cfg.eval_period == 0:
            policy = greedy_policy_from_bundle(bundle)
            train_log.rows.append(
                LogRow(
                    step=step + 1,
                    window_return=finite_window_return(env, policy, cfg.eval_horizon),
                    objective=last_stats["objective"],
                    penalty_residual=last_stats["penalty_residual"],
                    mass_estimate=last_stats["mass_estimate"],
                    lr=effective_lr(opts["v"]),
                )
            )
            if hook is not None:
                hook(step + 1, bundle)
    return train_log


def deep_alm_train(env: TabularMDP, cfg: ScalConfig, inner_steps: int = 10) -> TrainLog:
    """Deep parameterized ALM: the multiplier frozen in z for inner_steps updates,
    Gauss-Seidel ordering theta -> phi -> psi, no value target network."""
    from .lp_oracle import finite_window_return

    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    slack = cfg.slack_scale if cfg.slack_scale is not None else default_slack_scale(env)
    bundle = make_bundle(env.n_states, env.n_actions, cfg.width, rng, slack)
    sync_target(bundle)  # x_target / x_state_target serve as the frozen theta^k
    opts = _make_opts(bundle, cfg)
    buffer = ReplayBuffer(cfg.capacity)
    train_log = TrainLog(bundle=bundle)
    if cfg.total_steps == 0:
        return train_log
    state = int(rng.choice(env.n_states, p=env.rho0))
    buffer.push_initial(state)
    episode: list[TransitionTuple] = []
    last_stats = {"objective": 0.0, "penalty_residual": 0.0, "mass_estimate": 0.0}
    trained = 0
    for step in range(cfg.total_steps):
        state = _interact(env, bundle, cfg, rng, buffer, state, episode, step)
        if buffer.size >= cfg.batch and buffer.n_initial >= cfg.batch:
            last_stats = _deep_alm_step(buffer, bundle, opts, cfg, rng, env.gamma)
            trained += 1
            if trained % inner_steps == 0:
                bundle.x_target = _copy_weights(bundle.x_net, bundle.x_target)
                bundle.x_state_target = _copy_weights(bundle.x_state_head, bundle.x_state_target)
        if (step + 1) % cfg.eval_period == 0:
            policy = greedy_policy_from_bundle(bundle)
            train_log.rows.append(
                LogRow(
                    step=step + 1,
                    window_return=finite_window_return(env, policy, cfg.eval_horizon),
                    objective=last_stats["objective"],
                    penalty_residual=last_stats["penalty_residual"],
                    mass_estimate=last_stats["mass_estimate"],
                    lr=effective_lr(opts["v"]),
                )
            )
    return train_log


def _copy_weights(src: TwoLayerNet, dst: TwoLayerNet) -> TwoLayerNet:
    dst.weights = src.weights.copy()
    return dst


def _multiplier_values(bundle: NetBundle, batch: TransitionBatch, use_target: bool):
    """x(s_i, a_i) plus the pieces needed for its gradient."""
    b, A = len(batch), bundle.n_actions
    s_feats = state_features_batch(batch.s, bundle.n_states)
    rep_s = np.repeat(batch.s, A)
    rep_a = np.tile(np.arange(A), b)
    feats_all = sa_features_batch(rep_s, rep_a, bundle.n_states, bundle.n_actions)
    x_net = bundle.x_target if use_target else bundle.x_net
    x_state = bundle.x_state_target if use_target else bundle.x_state_head
    x1_raw = forward_batch(x_state, s_feats)
    x1 = softplus(x1_raw)
    probs = softmax(forward_batch(x_net, feats_all).reshape(b, A))
    vals = x1 * probs[np.arange(b), batch.a]
    return vals, x1, x1_raw, probs, s_feats, feats_all


def _deep_alm_step(buffer, bundle, opts, cfg, rng, gamma) -> dict[str, float]:
    b = cfg.batch
    batch = sample_proportional(
        buffer, b, rng, bundle.v_net, bundle.v_net, gamma, bundle.n_states, cfg.eps_prio
    )
    init_states = buffer.sample_initial(b, rng)
    S = bundle.n_states
    s_feats = state_features_batch(batch.s, S)
    sn_feats = state_features_batch(batch.s_next, S)
    s0_feats = state_features_batch(init_states, S)
    sa_feats = sa_features_batch(batch.s, batch.a, S, bundle.n_actions)
    v_s = forward_batch(bundle.v_net, s_feats)
    v_n = forward_batch(bundle.v_net, sn_feats)
    h_raw = forward_batch(bundle.h_net, sa_feats)
    h = bundle.slack_scale * sigmoid(h_raw)
    x_frozen, *_ = _multiplier_values(bundle, batch, use_target=True)
    disc = gamma ** batch.steps.astype(float)
    z = x_frozen + cfg.mu * (h + batch.r + disc * v_n - v_s)

    # theta step: least-squares pull of x_theta toward z
    x_live, x1, x1_raw, probs, _, feats_all = _multiplier_values(bundle, batch, use_target=False)
    coef = x_live - z
    p_a = probs[np.arange(b), batch.a]
    gx_state = accumulate_grad(bundle.x_state_head, s_feats, coef * p_a * sigmoid(x1_raw)) / b
    dlogit = -probs * p_a[:, None]
    dlogit[np.arange(b), batch.a] += p_a
    gx_logits = accumulate_grad(bundle.x_net, feats_all, ((coef * x1)[:, None] * dlogit).ravel()) / b
    gx = clip_local({"x_state": gx_state, "x_logits": gx_logits})
    bundle.x_state_head.weights = adam_step(opts["x_state"], bundle.x_state_head.weights, gx["x_state"])
    bundle.x_net.weights = adam_step(opts["x_logits"], bundle.x_net.weights, gx["x_logits"])

    # phi step with the updated multiplier: grad V(s0) + x (disc grad V(s') - grad V(s))
    x_new, *_ = _multiplier_values(bundle, batch, use_target=False)
    gv = (
        accumulate_grad(bundle.v_net, s0_feats, np.ones(b))
        + accumulate_grad(bundle.v_net, sn_feats, disc * x_new)
        + accumulate_grad(bundle.v_net, s_feats, -x_new)
    ) / b
    gv = clip_local({"v": gv})["v"]
    bundle.v_net.weights = adam_step(opts["v"], bundle.v_net.weights, gv)

    # psi step: x grad h
    gh = accumulate_grad(
        bundle.h_net, sa_feats, x_new * bundle.slack_scale * _sigmoid_deriv(h_raw)
    ) / b
    gh = clip_local({"h": gh})["h"]
    bundle.h_net.weights = adam_step(opts["h"], bundle.h_net.weights, gh)

    v0 = forward_batch(bundle.v_net, s0_feats)
    return {
        "objective": float(v0.mean() + (x_new * z).mean() / cfg.mu),
        "penalty_residual": float(((x_new - z) ** 2).mean()),
        "mass_estimate": float(x_new.mean()),
    }

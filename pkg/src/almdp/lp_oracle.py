"""Exact tabular machinery: value iteration, the Z-function, the weighted augmented
Lagrangian, the ALM outer loop, and KKT / dual-residual verification.

Everything here is the ground truth the stochastic solvers are tested against.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mdp_core import Policy, TabularMDP

log = logging.getLogger(__name__)

WEIGHT_ATOL = 1e-12


class ConvergenceError(RuntimeError):
    """Inner solve hit its iteration cap; carries the achieved stationarity."""

    def __init__(self, stationarity: float, iterations: int):
        super().__init__(
            f"inner solve stopped at stationarity {stationarity:.3e} after {iterations} iterations"
        )
        self.stationarity = stationarity
        self.iterations = iterations


@dataclass
class AlmState:
    """One ALM iterate: value vector V, slack table h >= 0, multiplier table x >= 0."""

    V: np.ndarray
    h: np.ndarray
    x: np.ndarray
    mu: float
    iteration: int = 0

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("penalty mu must be positive")
        if np.any(self.h < 0):
            raise ValueError("slack h must be nonnegative")


def uniform_weights(mdp: TabularMDP) -> np.ndarray:
    """Uniform weight distribution over (s, a); matches uniform replay sampling."""
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / (mdp.n_states * mdp.n_actions))


def check_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_ATOL:
        raise ValueError("weight table must be a distribution over (s, a)")
    return w


def initial_alm_state(mdp: TabularMDP, mu: float) -> AlmState:
    return AlmState(
        V=np.zeros(mdp.n_states),
        h=np.zeros((mdp.n_states, mdp.n_actions)),
        x=np.zeros((mdp.n_states, mdp.n_actions)),
        mu=mu,
        iteration=0,
    )


# ---------------------------------------------------------------------------
# exact Bellman solvers


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Iterate the optimal Bellman operator from zero until ||TV - V||_inf <= tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        TV = (mdp.reward + mdp.gamma * mdp.transition @ V).max(axis=1)
        if np.max(np.abs(TV - V)) <= tol:
            return TV
        V = TV
    return V  # contraction guarantees we never get here for sane tolerances


def bellman_residual(mdp: TabularMDP, V: np.ndarray) -> float:
    TV = (mdp.reward + mdp.gamma * mdp.transition @ V).max(axis=1)
    return float(np.max(np.abs(TV - V)))


def greedy_policy(mdp: TabularMDP, V: np.ndarray) -> Policy:
    """Deterministic argmax policy; ties broken by lowest action index."""
    q = mdp.reward + mdp.gamma * mdp.transition @ np.asarray(V, dtype=float)
    return Policy.deterministic(q.argmax(axis=1), mdp.n_actions)


def policy_evaluation(mdp: TabularMDP, policy: Policy) -> np.ndarray:
    """Exact V^pi via the linear system (I - gamma P_pi) V = r_pi."""
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def policy_return(mdp: TabularMDP, policy: Policy) -> float:
    """Exact discounted return rho0 . V^pi."""
    return float(mdp.rho0 @ policy_evaluation(mdp, policy))


def finite_window_return(mdp: TabularMDP, policy: Policy, horizon: int) -> float:
    """Exact undiscounted expected return over the first `horizon` steps from rho0."""
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    dist = mdp.rho0.copy()
    total = 0.0
    for _ in range(horizon):
        total += dist @ r_pi
        dist = dist @ P_pi
    return float(total)


# ---------------------------------------------------------------------------
# Z-function and the weighted augmented Lagrangian


def z_sample(V, h, x, mu, s, a, r, s_next, disc) -> float:
    """Sampled multiplier update term: x(s,a) + mu*(h(s,a) + r + disc*V(s') - V(s)).

    disc generalizes gamma to gamma**steps for multi-step tuples.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    return float(x[s, a] + mu * (h[s, a] + r + disc * V[s_next] - V[s]))


def z_table(mdp: TabularMDP, V: np.ndarray, h: np.ndarray, x: np.ndarray, mu: float) -> np.ndarray:
    """Z(s,a) = x + mu*(h + r + gamma*E[V(s')] - V(s)) for all pairs."""
    return x + mu * (h + mdp.reward + mdp.gamma * mdp.transition @ V - V[:, None])


def z_function(mdp: TabularMDP, state: AlmState, s: int, a: int) -> float:
    """Conditional expectation of z_sample over s' ~ P(.|s,a)."""
    ev = float(mdp.transition[s, a] @ state.V)
    return float(state.x[s, a] + state.mu * (state.h[s, a] + mdp.reward[s, a] + mdp.gamma * ev - state.V[s]))


def augmented_lagrangian_value(mdp: TabularMDP, w: np.ndarray, state: AlmState) -> float:
    """L_mu(V, h, x) = rho0 . V + (1/2mu) sum w Z^2."""
    Z = z_table(mdp, state.V, state.h, state.x, state.mu)
    return float(mdp.rho0 @ state.V + (0.5 / state.mu) * np.sum(w * Z * Z))


# ---------------------------------------------------------------------------
# inner solve: min over (V free, h >= 0) of rho0.V + scale/(2 mu) sum w Z^2


@dataclass
class InnerSolveInfo:
    iterations: int
    stationarity: float
    polished: bool


def _inner_objective(mdp, w, x, mu, scale, V, h):
    Z = z_table(mdp, V, h, x, mu)
    return float(mdp.rho0 @ V + (0.5 * scale / mu) * np.sum(w * Z * Z))


def _inner_grads(mdp, w, x, mu, scale, V, h):
    Z = z_table(mdp, V, h, x, mu)
    G = scale * w * Z  # dF/dZ * mu
    gV = mdp.rho0 + mdp.gamma * np.einsum("sa,sat->t", G, mdp.transition) - G.sum(axis=1)
    gh = G
    return gV, gh


def _stationarity(gV, gh, h):
    pg_h = np.where(h > 0, gh, np.minimum(gh, 0.0))
    return float(max(np.max(np.abs(gV)), np.max(np.abs(pg_h))))


def _active_set_polish(mdp, w, x, mu, scale, V_guess):
    """Solve the h-eliminated KKT system exactly for a guessed positive-Z set.

    At an inner solution h = [-Z_unc]_+ / mu and Z = [Z_unc]_+ with
    Z_unc = x + mu*(r + gamma P V - V); stationarity in V reads
    flow(w [Z_unc]_+) = rho0 / scale. Iterating the sign pattern is a
    semismooth Newton step and lands on the exact solution in a few passes.
    """
    S, A = mdp.n_states, mdp.n_actions
    c = x + mu * mdp.reward  # constant part of Z_unc
    # K[s,a,t] = delta_t(s) - gamma P(t|s,a);  Z_unc = c - mu * (K @ V) per row
    K = -mdp.gamma * mdp.transition.copy()
    K[np.arange(S), :, np.arange(S)] += 1.0
    V = V_guess.copy()
    mask = None
    for _ in range(60):
        Z_unc = c - mu * np.einsum("sat,t->sa", K, V)
        new_mask = Z_unc > 0
        if mask is not None and np.array_equal(new_mask, mask):
            break
        mask = new_mask
        wm = w * mask
        # flow(w Z_unc | mask) = rho0/scale, linear in V
        M = mu * np.einsum("sa,sau,sat->tu", wm, K, K)
        b = np.einsum("sa,sa,sat->t", wm, c, K) - mdp.rho0 / scale
        try:
            V = np.linalg.solve(M, b)
        except np.linalg.LinAlgError:
            V, *_ = np.linalg.lstsq(M, b, rcond=None)
    Z_unc = c - mu * np.einsum("sat,t->sa", K, V)
    h = np.maximum(0.0, -Z_unc) / mu
    return V, h


def _penalized_inner_solve(
    mdp: TabularMDP,
    w: np.ndarray,
    x: np.ndarray,
    mu: float,
    tol: float,
    scale: float = 1.0,
    max_iter: int = 200_000,
    V0: np.ndarray | None = None,
    polish: bool = True,
):
    """FISTA with backtracking on the joint (V, h >= 0) quadratic, plus an exact
    active-set refinement. Returns (V, h, InnerSolveInfo)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    S, A = mdp.n_states, mdp.n_actions
    V = np.zeros(S) if V0 is None else V0.astype(float).copy()
    Z_unc = x + mu * (mdp.reward + mdp.gamma * mdp.transition @ V - V[:, None])
    h = np.maximum(0.0, -Z_unc) / mu
    Vp, hp = V.copy(), h.copy()
    t_mom = 1.0
    step = 1.0
    f_cur = _inner_objective(mdp, w, x, mu, scale, V, h)
    best = None

    def _check(Vc, hc):
        gV, gh = _inner_grads(mdp, w, x, mu, scale, Vc, hc)
        return _stationarity(gV, gh, hc)

    for it in range(max_iter):
        if polish and it % 40 == 0:
            Vq, hq = _active_set_polish(mdp, w, x, mu, scale, V)
            stat_q = _check(Vq, hq)
            if stat_q <= tol:
                return Vq, hq, InnerSolveInfo(iterations=it, stationarity=stat_q, polished=True)
        # FISTA extrapolation
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        beta_mom = (t_mom - 1.0) / t_next
        Vy = V + beta_mom * (V - Vp)
        hy = np.maximum(0.0, h + beta_mom * (h - hp))
        gV, gh = _inner_grads(mdp, w, x, mu, scale, Vy, hy)
        f_y = _inner_objective(mdp, w, x, mu, scale, Vy, hy)
        while True:
            Vn = Vy - step * gV
            hn = np.maximum(0.0, hy - step * gh)
            dV, dh = Vn - Vy, hn - hy
            f_n = _inner_objective(mdp, w, x, mu, scale, Vn, hn)
            quad = f_y + gV @ dV + np.sum(gh * dh) + (np.sum(dV * dV) + np.sum(dh * dh)) / (2 * step)
            if f_n <= quad + 1e-15 * max(1.0, abs(f_n)):
                break
            step *= 0.5
        if f_n > f_cur:  # adaptive restart
            t_next = 1.0
            Vn = V - step * gV
            hn = np.maximum(0.0, h - step * gh)
            f_n = _inner_objective(mdp, w, x, mu, scale, Vn, hn)
        Vp, hp = V, h
        V, h = Vn, hn
        f_cur = f_n
        t_mom = t_next
        step = min(step * 1.05, 1e6)
        if it % 5 == 0:
            stat = _check(V, h)
            if best is None or stat < best:
                best = stat
            if stat <= tol:
                return V, h, InnerSolveInfo(iterations=it + 1, stationarity=stat, polished=False)
    stat = _check(V, h)
    raise ConvergenceError(min(stat, best if best is not None else stat), max_iter)


def alm_inner_solve(
    mdp: TabularMDP,
    w: np.ndarray,
    x: np.ndarray,
    mu: float,
    tol: float = 1e-9,
    max_iter: int = 200_000,
    V0: np.ndarray | None = None,
    return_info: bool = False,
):
    """Approximately minimize L_mu(V, h, x) over V free and h >= 0.

    Stationarity is measured as the max of ||grad_V||_inf and the projected
    gradient of h (gradient where h > 0, its negative part where h = 0).
    """
    w = check_weights(w)
    V, h, info = _penalized_inner_solve(mdp, w, x, mu, tol, scale=1.0, max_iter=max_iter, V0=V0)
    if return_info:
        return V, h, info
    return V, h


def alm_iterate(mdp: TabularMDP, w: np.ndarray, state: AlmState, tol: float = 1e-9) -> AlmState:
    """One ALM outer step: inner solve, then x <- Z(V, h, x_old) everywhere."""
    w = check_weights(w)
    V, h = alm_inner_solve(mdp, w, state.x, state.mu, tol=tol, V0=state.V)
    x_new = z_table(mdp, V, h, state.x, state.mu)
    clamp = float(np.maximum(0.0, -x_new).max())
    if clamp > 0:
        if clamp > 10 * tol:
            log.warning("alm_iterate clamped negative multiplier mass %.3e", clamp)
        x_new = np.maximum(x_new, 0.0)
    return AlmState(V=V, h=h, x=x_new, mu=state.mu, iteration=state.iteration + 1)


@dataclass
class AlmRunInfo:
    iterations: int
    dual_residual: float
    x_change: float
    converged: bool
    history: list = field(default_factory=list)


def alm_solve(
    mdp: TabularMDP,
    w: np.ndarray,
    mu: float = 10.0,
    outer_tol: float = 1e-6,
    max_outer: int = 200,
    inner_tol: float = 1e-9,
    record_history: bool = False,
) -> tuple[AlmState, AlmRunInfo]:
    """Run Algorithm-1-style outer iterations until the multiplier stops moving."""
    w = check_weights(w)
    state = initial_alm_state(mdp, mu)
    x_change = np.inf
    for k in range(max_outer):
        new = alm_iterate(mdp, w, state, tol=inner_tol)
        x_change = float(np.max(np.abs(new.x - state.x)))
        state = new
        if record_history:
            pass
        if x_change <= outer_tol:
            break
    _, dual_norm = dual_residuals(mdp, w, state.x)
    return state, AlmRunInfo(
        iterations=state.iteration,
        dual_residual=dual_norm,
        x_change=x_change,
        converged=x_change <= outer_tol,
    )


# ---------------------------------------------------------------------------
# dual-side verification


def dual_residuals(mdp: TabularMDP, w: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-state dual LP constraint residual and its inf-norm.

    res(s') = sum_{s,a} (delta_{s'}(s) - gamma P(s'|s,a)) w(s,a) x(s,a) - rho0(s').
    """
    wx = w * x
    res = wx.sum(axis=1) - mdp.gamma * np.einsum("sa,sat->t", wx, mdp.transition) - mdp.rho0
    return res, float(np.max(np.abs(res)))


def policy_from_multiplier(w: np.ndarray, x: np.ndarray) -> Policy:
    """pi(a|s) = w(s,a)x(s,a) / sum_a' w(s,a')x(s,a'); zero-mass states get uniform."""
    mass = w * x
    totals = mass.sum(axis=1, keepdims=True)
    n_actions = w.shape[1]
    probs = np.where(totals > 0, mass / np.where(totals > 0, totals, 1.0), 1.0 / n_actions)
    return Policy(probs)


@dataclass
class KktReport:
    """Inf-norms of the three KKT blocks of the proximal dual problem."""

    multiplier_update: float
    dual_feasibility: float
    nonnegativity: float

    @property
    def max_block(self) -> float:
        return max(self.multiplier_update, self.dual_feasibility, self.nonnegativity)


def kkt_check(
    mdp: TabularMDP,
    w: np.ndarray,
    V: np.ndarray,
    h: np.ndarray,
    x: np.ndarray,
    x_prev: np.ndarray,
    mu: float,
) -> KktReport:
    """Report violations of the three-block KKT system of the proximal update."""
    update = x - (x_prev + mu * (h + mdp.reward + mdp.gamma * mdp.transition @ V - V[:, None]))
    _, dual_norm = dual_residuals(mdp, w, x)
    nonneg = float(np.maximum(0.0, -np.minimum(x, h)).max())
    return KktReport(
        multiplier_update=float(np.max(np.abs(update))),
        dual_feasibility=dual_norm,
        nonnegativity=nonneg,
    )


def save_oracle_report(path: str, mdp: TabularMDP, V: np.ndarray, x: np.ndarray,
                       policy: Policy, residuals: dict[str, float]) -> None:
    """Structured text report of oracle outputs, consumed by the CLI verify command."""
    with open(path, "w") as fh:
        fh.write(f"n_states {mdp.n_states}\nn_actions {mdp.n_actions}\ngamma {float(mdp.gamma)!r}\n")
        fh.write("V_star " + " ".join(repr(float(v)) for v in V) + "\n")
        fh.write("x_star " + " ".join(repr(float(v)) for v in x.ravel()) + "\n")
        fh.write("policy " + " ".join(str(int(a)) for a in policy.probs.argmax(axis=1)) + "\n")
        for name, val in residuals.items():
            fh.write(f"residual.{name} {float(val)!r}\n")

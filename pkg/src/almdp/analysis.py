"""Numerical verification of the theory: error terms, penalty-vs-ALM scaling
ratios, restricted strong convexity, gradient-variance ablation, and residual
decay of the wide-network projected-gradient scheme.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .envs import random_mdp
from .lp_oracle import (
    AlmState,
    alm_inner_solve,
    alm_iterate,
    augmented_lagrangian_value,
    check_weights,
    initial_alm_state,
    uniform_weights,
    z_table,
    _penalized_inner_solve,
)
from .mdp_core import TabularMDP
from .nets import (
    TwoLayerNet,
    accumulate_grad,
    all_sa_features,
    forward_batch,
    init_net,
    project_ball,
    state_features_batch,
)
from .scal import ScalConfig, scal_train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# error terms of the inexact ALM view


@dataclass
class ErrorTerms:
    """Inexactness of one outer iteration: objective gap and multiplier-fit gap."""

    eps_L: float
    eps_x: float
    k: int


def error_terms(
    mdp: TabularMDP,
    w: np.ndarray,
    iterate_k: AlmState,
    iterate_k1: AlmState,
    mu: float,
    tol: float = 1e-9,
) -> ErrorTerms:
    """eps_L = L(V_{k+1}, h_{k+1}, x_k) - inf L(., ., x_k); eps_x = weighted squared
    gap between x_{k+1} and the Z-function at the new primal point."""
    w = check_weights(w)
    V_hat, h_hat = alm_inner_solve(mdp, w, iterate_k.x, mu, tol=tol / 10.0)
    inf_L = augmented_lagrangian_value(
        mdp, w, AlmState(V=V_hat, h=h_hat, x=iterate_k.x, mu=mu)
    )
    achieved = augmented_lagrangian_value(
        mdp, w, AlmState(V=iterate_k1.V, h=iterate_k1.h, x=iterate_k.x, mu=mu)
    )
    eps_L = achieved - inf_L
    Z = z_table(mdp, iterate_k1.V, iterate_k1.h, iterate_k.x, mu)
    eps_x = float(np.sum(w * (iterate_k1.x - Z) ** 2))
    if eps_L < -1e-10:
        log.warning("eps_L = %.3e dipped below zero; inner oracle tolerance too loose", eps_L)
    return ErrorTerms(eps_L=float(eps_L), eps_x=eps_x, k=iterate_k.iteration)


def proximal_map(mdp: TabularMDP, w: np.ndarray, x: np.ndarray, mu: float, tol: float = 1e-10) -> np.ndarray:
    """The resolvent T x = (I + mu S)^{-1} x, realized by an exact ALM inner solve."""
    V, h = alm_inner_solve(mdp, w, x, mu, tol=tol)
    return np.maximum(z_table(mdp, V, h, x, mu), 0.0)


def prox_residual(mdp: TabularMDP, w: np.ndarray, x: np.ndarray, mu: float, tol: float = 1e-10) -> float:
    """E_w (x - Tx)^2."""
    Tx = proximal_map(mdp, w, x, mu, tol)
    return float(np.sum(w * (x - Tx) ** 2))


def ppt_bound_check(
    mdp: TabularMDP,
    w: np.ndarray,
    iterate_k: AlmState,
    iterate_k1: AlmState,
    mu: float,
    tol: float = 1e-10,
) -> tuple[float, float]:
    """Left and right side of the proximal-error bound: E_w(x_{k+1} - x_hat)^2
    vs 2 eps_x + 4 mu eps_L."""
    terms = error_terms(mdp, w, iterate_k, iterate_k1, mu, tol=tol)
    x_hat = proximal_map(mdp, w, iterate_k.x, mu, tol=tol)
    lhs = float(np.sum(w * (iterate_k1.x - x_hat) ** 2))
    rhs = 2.0 * terms.eps_x + 4.0 * mu * terms.eps_L
    return lhs, rhs


# ---------------------------------------------------------------------------
# quadratic-penalty vs ALM scaling ratios


@dataclass
class ScalingRatios:
    mu: float
    beta: float

    @property
    def xi1(self) -> float:
        return 4.0 * self.mu * self.beta / (4.0 * self.mu * self.beta - 1.0)

    @property
    def xi2(self) -> float:
        return (4.0 * self.mu * self.beta - 2.0) / (4.0 * self.mu * self.beta - 1.0)


def _composite_fn_grads(mdp, w, x_c, mu, beta, V, h, x):
    """Function-space gradients of the quadratic-penalty composite
    rho0.V + (1/2mu) sum w x Z + (beta/2) sum w (x - Z)^2, Z frozen at x_c."""
    Z = z_table(mdp, V, h, x_c, mu)
    G = w * ((0.5 / mu) * x - beta * (x - Z))  # dF/dZ
    gV = mdp.rho0 + mu * (np.einsum("sa,sat->t", G, mdp.transition) * mdp.gamma - G.sum(axis=1))
    gh = mu * G
    gx = w * ((0.5 / mu) * Z + beta * (x - Z))
    value = float(
        mdp.rho0 @ V + (0.5 / mu) * np.sum(w * x * Z) + 0.5 * beta * np.sum(w * (x - Z) ** 2)
    )
    return gV, gh, gx, value


def composite_tabular_minimize(
    mdp: TabularMDP,
    w: np.ndarray,
    x_c: np.ndarray,
    mu: float,
    beta: float,
    tol: float = 1e-10,
    max_iter: int = 4000,
):
    """High-precision minimizer of the tabular composite over (V free, h >= 0, x free).

    Runs accelerated projected gradient on the joint variable, records the
    multiplier/Z first-order identity deviation at that point, then refines via
    the h-eliminated exact solve of the reduced problem (penalty 1/(2 mu xi1)).
    Returns (V, h, x, info dict).
    """
    w = check_weights(w)
    S, A = mdp.n_states, mdp.n_actions
    V = np.zeros(S)
    h = np.zeros((S, A))
    x = x_c.copy()
    Vp, hp, xp = V.copy(), h.copy(), x.copy()
    t_mom, step = 1.0, 1.0
    _, _, _, f_cur = _composite_fn_grads(mdp, w, x_c, mu, beta, V, h, x)

    def _stat(Vc, hc, xc):
        gV, gh, gx, _ = _composite_fn_grads(mdp, w, x_c, mu, beta, Vc, hc, xc)
        pg_h = np.where(hc > 0, gh, np.minimum(gh, 0.0))
        return float(max(np.max(np.abs(gV)), np.max(np.abs(pg_h)), np.max(np.abs(gx))))

    fista_tol = 1e-6
    stat = np.inf
    for it in range(max_iter):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        b_mom = (t_mom - 1.0) / t_next
        Vy = V + b_mom * (V - Vp)
        hy = np.maximum(0.0, h + b_mom * (h - hp))
        xy = x + b_mom * (x - xp)
        gV, gh, gx, f_y = _composite_fn_grads(mdp, w, x_c, mu, beta, Vy, hy, xy)
        while True:
            Vn = Vy - step * gV
            hn = np.maximum(0.0, hy - step * gh)
            xn = xy - step * gx
            dV, dh, dx = Vn - Vy, hn - hy, xn - xy
            _, _, _, f_n = _composite_fn_grads(mdp, w, x_c, mu, beta, Vn, hn, xn)
            quad = (
                f_y + gV @ dV + np.sum(gh * dh) + np.sum(gx * dx)
                + (np.sum(dV**2) + np.sum(dh**2) + np.sum(dx**2)) / (2 * step)
            )
            if f_n <= quad + 1e-15 * max(1.0, abs(f_n)):
                break
            step *= 0.5
        if f_n > f_cur:
            t_next = 1.0
            Vn, hn, xn = V - step * gV, np.maximum(0.0, h - step * gh), x - step * gx
            _, _, _, f_n = _composite_fn_grads(mdp, w, x_c, mu, beta, Vn, hn, xn)
        Vp, hp, xp = V, h, x
        V, h, x = Vn, hn, xn
        f_cur, t_mom = f_n, t_next
        step = min(step * 1.05, 1e6)
        if it % 10 == 0:
            stat = _stat(V, h, x)
            if stat <= fista_tol:
                break
    Z_fista = z_table(mdp, V, h, x_c, mu)
    xvh_dev = float(np.max(np.abs(x - (1.0 - 0.5 / (mu * beta)) * Z_fista)))
    fista_stat = _stat(V, h, x)

    # exact refinement: eliminate x, solve the reduced problem to machine precision
    ratios = ScalingRatios(mu=mu, beta=beta)
    V, h, _ = _penalized_inner_solve(mdp, w, x_c, mu, tol, scale=1.0 / ratios.xi1, V0=V)
    Z = z_table(mdp, V, h, x_c, mu)
    x = (1.0 - 0.5 / (mu * beta)) * Z
    info = {
        "fista_stationarity": fista_stat,
        "stationarity": _stat(V, h, x),
        "xvh_dev": xvh_dev,
        "iterations": it + 1,
    }
    return V, h, x, info


@dataclass
class ScalingReport:
    ratios: ScalingRatios
    max_x_dev: float
    max_z_dev: float
    xvh_dev: float
    x_center: np.ndarray
    x_hat: np.ndarray
    x_tilde: np.ndarray


def _warm_start_center(mdp, w, mu, tol):
    """A multiplier near the LP solution: large-penalty solve, then two exact
    outer steps at the requested mu. Near x* the exact update's active set is
    stable, which the pointwise ratio identity implicitly requires."""
    from .lp_oracle import alm_solve

    solve_mu = max(mu, 50.0 / (1.0 - mdp.gamma))
    state, _ = alm_solve(mdp, w, mu=solve_mu, outer_tol=1e-10, max_outer=300, inner_tol=min(tol, 1e-10))
    state = AlmState(V=state.V, h=state.h, x=state.x, mu=mu)
    for _ in range(2):
        state = alm_iterate(mdp, w, state, tol=min(tol, 1e-10))
    return state.x


def scaling_ratio_check(
    mdp: TabularMDP,
    w: np.ndarray,
    mu: float,
    beta: float,
    tol: float = 1e-10,
    x_center: np.ndarray | None = None,
) -> ScalingReport:
    """Compare the composite minimizer against one exact ALM update from the same
    multiplier: reports max |x_tilde - xi2 x_hat| and max |Z_tilde - xi1 Z_hat|.

    The pointwise ratio identity requires the dual-feasibility system to pin the
    positive support compatibly for both problems; it holds to machine precision
    when every state carries a single action (the occupancy is uniquely
    determined) or in the large-beta limit, and the report carries the true
    deviation whenever those hypotheses fail.
    """
    if beta <= 1.0 / (4.0 * mu):
        raise ValueError("beta must exceed 1/(4 mu)")
    w = check_weights(w)
    if x_center is None:
        x_center = _warm_start_center(mdp, w, mu, tol)
    ratios = ScalingRatios(mu=mu, beta=beta)
    V_hat, h_hat = alm_inner_solve(mdp, w, x_center, mu, tol=tol)
    Z_hat = z_table(mdp, V_hat, h_hat, x_center, mu)
    x_hat = Z_hat
    V_t, h_t, x_tilde, info = composite_tabular_minimize(mdp, w, x_center, mu, beta, tol=tol)
    Z_tilde = z_table(mdp, V_t, h_t, x_center, mu)
    return ScalingReport(
        ratios=ratios,
        max_x_dev=float(np.max(np.abs(x_tilde - ratios.xi2 * x_hat))),
        max_z_dev=float(np.max(np.abs(Z_tilde - ratios.xi1 * Z_hat))),
        xvh_dev=info["xvh_dev"],
        x_center=x_center,
        x_hat=x_hat,
        x_tilde=x_tilde,
    )


# ---------------------------------------------------------------------------
# restricted strong convexity probes


@dataclass
class ConvexityReport:
    min_quotient: float
    x_block_constant: float
    n_probes: int


def quadratic_form(mdp, w, mu, beta, dV, dh, dx) -> float:
    """Second-order part of the composite along a function-space direction."""
    D = mu * (dh + mdp.gamma * mdp.transition @ dV - dV[:, None])
    return float((0.5 / mu) * np.sum(w * dx * D) + 0.5 * beta * np.sum(w * (dx - D) ** 2))


def strong_convexity_probe(
    mu: float, beta: float, n_probes: int, rng: np.random.Generator
) -> ConvexityReport:
    """Random-direction probes of the composite's quadratic part on a small MDP.

    Returns the minimum Rayleigh-type quotient over joint directions and the
    x-only block constant (quadratic form minimized over the (V, h) part,
    normalized by the weighted x-norm).
    """
    if beta <= 1.0 / (4.0 * mu):
        raise ValueError("beta must exceed 1/(4 mu)")
    mdp = random_mdp(3, 2, 0.9, rng)
    w = uniform_weights(mdp)
    min_quotient = np.inf
    x_block = np.inf
    for _ in range(n_probes):
        dV = rng.normal(size=mdp.n_states)
        dh = rng.normal(size=(mdp.n_states, mdp.n_actions))
        dx = rng.normal(size=(mdp.n_states, mdp.n_actions))
        q = quadratic_form(mdp, w, mu, beta, dV, dh, dx)
        norm2 = float(np.sum(w * (dV[:, None] ** 2 + dh**2 + dx**2)))
        min_quotient = min(min_quotient, q / norm2)
        # x-block: minimize over the reachable D pointwise (parabola vertex)
        a_quad = 0.5 * beta
        b_lin = (0.5 / mu) * dx - beta * dx
        D_star = -b_lin / (2.0 * a_quad)
        q_x = float(
            (0.5 / mu) * np.sum(w * dx * D_star) + 0.5 * beta * np.sum(w * (dx - D_star) ** 2)
        )
        x_block = min(x_block, q_x / float(np.sum(w * dx**2)))
    return ConvexityReport(
        min_quotient=float(min_quotient), x_block_constant=float(x_block), n_probes=n_probes
    )


# ---------------------------------------------------------------------------
# gradient-variance ablation (double-sampling effect)


@dataclass
class AblationResult:
    steps: list[int]
    unbias: list[float]
    bias: list[float]


def _sample_next_states(mdp, s, a, rng):
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    u = rng.random(len(s))[:, None]
    return (cdf > u).argmax(axis=1)


def grad_variance_ablation(
    env: TabularMDP,
    cfg: ScalConfig,
    n_samples: int,
    n_checkpoints: int = 10,
    probe_batch: int = 32,
    fit_x_to_z: bool = False,
) -> AblationResult:
    """Trace-covariance of the two value-head gradient estimators along training.

    The un-bias estimator weights (gamma grad V(s') - grad V(s)) by the
    multiplier function x(s,a) (a fixed function of the pair); the bias estimator
    weights it by the sampled z, which shares the drawn s'. With fit_x_to_z the
    multiplier coefficient is replaced by the exact conditional expectation Z of
    the current networks, computable because the environment is tabular.
    """
    if n_samples == 1:
        log.warning("n_samples=1 gives a degenerate variance estimate (reported as 0)")
    cfg2 = ScalConfig(**{**cfg.__dict__, "eval_period": max(1, cfg.total_steps // n_checkpoints)})
    probe_rng = np.random.default_rng([cfg.seed, 9173])
    result = AblationResult(steps=[], unbias=[], bias=[])

    def _checkpoint(step, bundle):
        from .nets import multiplier_table, slack_table, value_table

        V = value_table(bundle.v_net, env.n_states)
        h = slack_table(bundle)
        x_tab = multiplier_table(bundle)
        Z_tab = x_tab + cfg.mu * (h + env.reward + env.gamma * env.transition @ V - V[:, None])
        coef1_tab = Z_tab if fit_x_to_z else x_tab
        g1_means, g2_means = [], []
        for _ in range(n_samples):
            s = probe_rng.integers(0, env.n_states, size=probe_batch)
            a = probe_rng.integers(0, env.n_actions, size=probe_batch)
            s_next = _sample_next_states(env, s, a, probe_rng)
            s0 = probe_rng.choice(env.n_states, size=probe_batch, p=env.rho0)
            z = x_tab[s, a] + cfg.mu * (
                h[s, a] + env.reward[s, a] + env.gamma * V[s_next] - V[s]
            )
            base = accumulate_grad(bundle.v_net, state_features_batch(s0, env.n_states), np.ones(probe_batch))
            sn_feats = state_features_batch(s_next, env.n_states)
            s_feats = state_features_batch(s, env.n_states)
            for coef, sink in ((coef1_tab[s, a], g1_means), (z, g2_means)):
                g = base + env.gamma * accumulate_grad(bundle.v_net, sn_feats, coef) \
                    - accumulate_grad(bundle.v_net, s_feats, coef)
                sink.append((g / probe_batch).ravel())
        result.steps.append(step)
        result.unbias.append(_trace_variance(np.array(g1_means)))
        result.bias.append(_trace_variance(np.array(g2_means)))

    scal_train(env, cfg2, hook=_checkpoint)
    return result


def _trace_variance(stacked: np.ndarray) -> float:
    if stacked.shape[0] < 2:
        return 0.0
    return float(stacked.var(axis=0, ddof=1).sum())


# ---------------------------------------------------------------------------
# NTK projected-gradient residual tracking


def ntk_residual_track(
    mdp: TabularMDP,
    cfg: ScalConfig,
    K: int,
    T_inner: int,
    alpha: float = 0.1,
    oracle_tol: float = 1e-10,
) -> list[float]:
    """Projected-and-averaged inner scheme on raw two-layer nets; logs the
    proximal residual E_w (x_theta - T x_theta)^2 at the start of each round.

    Uses the section-5.2 parameterization verbatim: the slack net has all-ones
    output weights (nonnegative by ReLU), the others carry random signs; every
    head is projected onto a ball of radius cfg.ntk_radius around its init.
    """
    if cfg.ntk_radius is None:
        raise ValueError("cfg.ntk_radius must be set for the projected scheme")
    w = uniform_weights(mdp)
    rng = np.random.default_rng(cfg.seed)
    S, A = mdp.n_states, mdp.n_actions
    d_s, d_sa = S, S + A
    v_net = init_net(cfg.width, d_s, rng)
    h_net = init_net(cfg.width, d_sa, rng, out_sign="ones")
    x_net = init_net(cfg.width, d_sa, rng)
    s_feats = state_features_batch(np.arange(S), S)
    sa_feats = all_sa_features(S, A)
    residuals = []
    for _ in range(K):
        x_tab = forward_batch(x_net, sa_feats).reshape(S, A)
        residuals.append(prox_residual(mdp, w, x_tab, cfg.mu, tol=oracle_tol))
        x_c = x_tab.copy()
        heads = [v_net, h_net, x_net]
        avg = [np.zeros_like(n.weights) for n in heads]
        for _t in range(T_inner):
            V = forward_batch(v_net, s_feats)
            h_tab = forward_batch(h_net, sa_feats).reshape(S, A)
            x_tab = forward_batch(x_net, sa_feats).reshape(S, A)
            gV, gh, gx, _ = _composite_fn_grads(mdp, w, x_c, cfg.mu, cfg.beta, V, h_tab, x_tab)
            v_net.weights = v_net.weights - alpha * accumulate_grad(v_net, s_feats, gV)
            h_net.weights = h_net.weights - alpha * accumulate_grad(h_net, sa_feats, gh.ravel())
            x_net.weights = x_net.weights - alpha * accumulate_grad(x_net, sa_feats, gx.ravel())
            for net, acc in zip(heads, avg):
                project_ball(net, cfg.ntk_radius)
                acc += net.weights
        for net, acc in zip(heads, avg):
            net.weights = acc / T_inner
    return residuals

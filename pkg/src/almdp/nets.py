"""Two-layer ReLU function approximators with fixed signed output weights,
the two-head multiplier and slack architectures, manual gradients, Adam with
learning-rate annealing, local gradient clipping, and ball projection.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np


# ---------------------------------------------------------------------------
# feature maps: tabular states/actions -> unit-norm vectors


def state_features(s: int, n_states: int) -> np.ndarray:
    phi = np.zeros(n_states)
    phi[s] = 1.0
    return phi


def state_features_batch(states: np.ndarray, n_states: int) -> np.ndarray:
    phi = np.zeros((len(states), n_states))
    phi[np.arange(len(states)), states] = 1.0
    return phi


def sa_features(s: int, a: int, n_states: int, n_actions: int) -> np.ndarray:
    phi = np.zeros(n_states + n_actions)
    phi[s] = 1.0 / np.sqrt(2.0)
    phi[n_states + a] = 1.0 / np.sqrt(2.0)
    return phi


def sa_features_batch(states, actions, n_states: int, n_actions: int) -> np.ndarray:
    n = len(states)
    phi = np.zeros((n, n_states + n_actions))
    idx = np.arange(n)
    phi[idx, np.asarray(states)] = 1.0 / np.sqrt(2.0)
    phi[idx, n_states + np.asarray(actions)] = 1.0 / np.sqrt(2.0)
    return phi


def all_sa_features(n_states: int, n_actions: int) -> np.ndarray:
    """(S*A, d) feature matrix in row-major (s, a) order."""
    s = np.repeat(np.arange(n_states), n_actions)
    a = np.tile(np.arange(n_actions), n_states)
    return sa_features_batch(s, a, n_states, n_actions)


# ---------------------------------------------------------------------------
# the two-layer net


@dataclass
class TwoLayerNet:
    """Width-m single-hidden-layer ReLU net with fixed +-1 output weights.

    forward(x) = (1/sqrt(m)) * sum_i out_sign[i] * relu(weights[i] . x).
    out_sign and init_weights are frozen at construction (arrays made read-only).
    """

    out_sign: np.ndarray
    weights: np.ndarray
    init_weights: np.ndarray

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.width)


def init_net(width: int, in_dim: int, rng: np.random.Generator, out_sign: str = "pm1") -> TwoLayerNet:
    """Random init: signs uniform on {-1,+1} ("pm1") or all ones ("ones", slack nets);
    weight rows drawn N(0, I/in_dim); init snapshot frozen."""
    if width < 1 or in_dim < 1:
        raise ValueError("width and in_dim must be >= 1")
    if out_sign == "pm1":
        signs = rng.choice(np.array([-1.0, 1.0]), size=width)
    elif out_sign == "ones":
        signs = np.ones(width)
    else:
        raise ValueError(f"unknown out_sign mode {out_sign!r}")
    W = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(width, in_dim))
    signs.setflags(write=False)
    init = W.copy()
    init.setflags(write=False)
    return TwoLayerNet(out_sign=signs, weights=W, init_weights=init)


def forward_value(net: TwoLayerNet, x: np.ndarray) -> float:
    """Scalar forward pass for a single feature vector (any head)."""
    pre = net.weights @ x
    return float(net.scale * (net.out_sign @ np.maximum(pre, 0.0)))


def forward_batch(net: TwoLayerNet, X: np.ndarray) -> np.ndarray:
    pre = X @ net.weights.T
    return net.scale * (np.maximum(pre, 0.0) @ net.out_sign)


def grad_net(net: TwoLayerNet, x: np.ndarray) -> np.ndarray:
    """d forward / d weights at input x: row i = scale*sign_i*1{w_i.x >= 0} * x.

    ReLU subgradient at 0 counted active; for unit-ball inputs the Frobenius
    norm of the result is at most 1.
    """
    active = (net.weights @ x) >= 0.0
    return net.scale * (net.out_sign * active)[:, None] * x[None, :]


def accumulate_grad(net: TwoLayerNet, X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """sum_i coef[i] * grad_net(net, X[i]) in two matmuls."""
    active = (X @ net.weights.T) >= 0.0  # (n, m)
    weighted = active * coef[:, None]
    return net.scale * net.out_sign[:, None] * (weighted.T @ X)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    """Adam accumulators plus a linear learning-rate anneal to zero."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    base_lr: float
    anneal_horizon: int


ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


def init_opt(net: TwoLayerNet, base_lr: float, anneal_horizon: int) -> OptState:
    return OptState(
        first_moment=np.zeros_like(net.weights),
        second_moment=np.zeros_like(net.weights),
        step_count=0,
        base_lr=base_lr,
        anneal_horizon=anneal_horizon,
    )


def effective_lr(opt: OptState) -> float:
    return opt.base_lr * max(0.0, 1.0 - opt.step_count / opt.anneal_horizon)


def adam_step(opt: OptState, weights: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update; returns the new weight array."""
    if grads.shape != weights.shape:
        raise ValueError("gradient shape must match weights")
    lr = effective_lr(opt)
    opt.step_count += 1
    opt.first_moment = ADAM_B1 * opt.first_moment + (1 - ADAM_B1) * grads
    opt.second_moment = ADAM_B2 * opt.second_moment + (1 - ADAM_B2) * grads * grads
    m_hat = opt.first_moment / (1 - ADAM_B1**opt.step_count)
    v_hat = opt.second_moment / (1 - ADAM_B2**opt.step_count)
    return weights - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def clip_one(g: np.ndarray) -> np.ndarray:
    """Rescale one gradient block so its Frobenius norm does not exceed 1."""
    norm = float(np.sqrt(np.sum(g * g)))
    if norm <= 1.0:
        return g
    return g / norm


def clip_local(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Per-head clipping: each block scaled by min(1, 1/||g_head||)."""
    return {name: clip_one(g) for name, g in grads.items()}


def project_ball(net: TwoLayerNet, radius: float) -> TwoLayerNet:
    """Project weights onto {||W - W_init||_F <= radius} (in place; idempotent)."""
    diff = net.weights - net.init_weights
    norm = float(np.sqrt(np.sum(diff * diff)))
    if norm > radius:
        net.weights = net.init_weights + diff * (radius / norm)
    return net


# ---------------------------------------------------------------------------
# multiplier / slack heads


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class NetBundle:
    """All trainable heads plus frozen target snapshots.

    x(s,a) = softplus(x_state_head(s)) * softmax_a(x_net(s,a)); the slack head is
    h(s,a) = slack_scale * sigmoid(h_net(s,a)), nonnegative by construction.
    """

    v_net: TwoLayerNet
    h_net: TwoLayerNet
    x_net: TwoLayerNet
    x_state_head: TwoLayerNet
    v_target: TwoLayerNet
    x_target: TwoLayerNet
    x_state_target: TwoLayerNet
    slack_scale: float
    n_states: int
    n_actions: int


def _copy_net(net: TwoLayerNet) -> TwoLayerNet:
    return replace(net, weights=net.weights.copy())


def make_bundle(
    n_states: int,
    n_actions: int,
    width: int,
    rng: np.random.Generator,
    slack_scale: float,
) -> NetBundle:
    d_s, d_sa = n_states, n_states + n_actions
    v_net = init_net(width, d_s, rng)
    h_net = init_net(width, d_sa, rng)
    x_net = init_net(width, d_sa, rng)
    x_state = init_net(width, d_s, rng)
    return NetBundle(
        v_net=v_net,
        h_net=h_net,
        x_net=x_net,
        x_state_head=x_state,
        v_target=_copy_net(v_net),
        x_target=_copy_net(x_net),
        x_state_target=_copy_net(x_state),
        slack_scale=slack_scale,
        n_states=n_states,
        n_actions=n_actions,
    )


def sync_target(bundle: NetBundle) -> NetBundle:
    """Snapshot the live value and multiplier heads into the frozen targets."""
    bundle.v_target = _copy_net(bundle.v_net)
    bundle.x_target = _copy_net(bundle.x_net)
    bundle.x_state_target = _copy_net(bundle.x_state_head)
    return bundle


def forward_multiplier_discrete(bundle: NetBundle, s: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Two-head multiplier at state s: (x1 > 0, softmax action distribution, per-action x)."""
    phi_s = state_features(s, bundle.n_states)
    x1 = float(softplus(forward_value(bundle.x_state_head, phi_s)))
    feats = sa_features_batch(
        np.full(bundle.n_actions, s), np.arange(bundle.n_actions), bundle.n_states, bundle.n_actions
    )
    logits = forward_batch(bundle.x_net, feats)
    probs = softmax(logits)
    return x1, probs, x1 * probs


def forward_slack_discrete(bundle: NetBundle, s: int) -> np.ndarray:
    """Per-action slack values C * sigmoid(raw head output) in [0, C]."""
    feats = sa_features_batch(
        np.full(bundle.n_actions, s), np.arange(bundle.n_actions), bundle.n_states, bundle.n_actions
    )
    return bundle.slack_scale * sigmoid(forward_batch(bundle.h_net, feats))


def forward_multiplier_continuous(
    bundle: NetBundle, s: int, u: np.ndarray, sigma: float, a_bar: float,
    mean_nets: list[TwoLayerNet] | None = None,
) -> float:
    """Continuous multiplier value at the squashed action a = a_bar * tanh(u).

    Returns x1(s) times the density of a under u ~ N(mean(s), sigma^2 I) pushed
    through the tanh squashing, via the change-of-variables correction. Unit-tested
    only; no continuous training loop. tanh output clamped at 1 - 1e-6.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    phi_s = state_features(s, bundle.n_states)
    x1 = float(softplus(forward_value(bundle.x_state_head, phi_s)))
    if mean_nets is None:
        mean = np.zeros_like(u)
    else:
        mean = np.array([forward_value(net, phi_s) for net in mean_nets])
    log_f = -0.5 * np.sum(((u - mean) / sigma) ** 2) - len(u) * np.log(sigma * np.sqrt(2 * np.pi))
    t = np.clip(np.tanh(u), -1.0 + 1e-6, 1.0 - 1e-6)
    log_jac = np.sum(np.log(a_bar * (1.0 - t * t)))
    return x1 * float(np.exp(log_f - log_jac))


# convenience tables over the whole tabular space -----------------------------


def value_table(net: TwoLayerNet, n_states: int) -> np.ndarray:
    return forward_batch(net, state_features_batch(np.arange(n_states), n_states))


def multiplier_table(bundle: NetBundle, use_target: bool = False) -> np.ndarray:
    """x(s,a) over all pairs, shape (S, A)."""
    x_net = bundle.x_target if use_target else bundle.x_net
    x_state = bundle.x_state_target if use_target else bundle.x_state_head
    x1 = softplus(value_table(x_state, bundle.n_states))
    logits = forward_batch(x_net, all_sa_features(bundle.n_states, bundle.n_actions))
    probs = softmax(logits.reshape(bundle.n_states, bundle.n_actions))
    return x1[:, None] * probs


def slack_table(bundle: NetBundle) -> np.ndarray:
    raw = forward_batch(bundle.h_net, all_sa_features(bundle.n_states, bundle.n_actions))
    return bundle.slack_scale * sigmoid(raw.reshape(bundle.n_states, bundle.n_actions))


# ---------------------------------------------------------------------------
# checkpoint serialization: flat binary, documented byte-exact
#
# layout (little endian): int64 width, int64 in_dim, float64 out_sign[m],
# float64 weights[m*d] row-major, float64 init_weights[m*d] row-major.


def save_net(net: TwoLayerNet, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qq", net.width, net.in_dim))
        fh.write(net.out_sign.astype("<f8").tobytes())
        fh.write(net.weights.astype("<f8").tobytes())
        fh.write(net.init_weights.astype("<f8").tobytes())


def load_net(path: str) -> TwoLayerNet:
    with open(path, "rb") as fh:
        m, d = struct.unpack("<qq", fh.read(16))
        signs = np.frombuffer(fh.read(8 * m), dtype="<f8").copy()
        W = np.frombuffer(fh.read(8 * m * d), dtype="<f8").reshape(m, d).copy()
        init = np.frombuffer(fh.read(8 * m * d), dtype="<f8").reshape(m, d).copy()
    signs.setflags(write=False)
    init.setflags(write=False)
    return TwoLayerNet(out_sign=signs, weights=W, init_weights=init)

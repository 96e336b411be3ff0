"""Single-trajectory on-policy optimisation with a per-condition Kalman reward tracker.

Each iteration picks a condition from an uncertainty-driven curriculum, rolls one
SDE trajectory, scores it, and takes one advantage-weighted regression step. The
tracker mean is the baseline; its variance is re-inflated by the KL divergence
between the policy before and after the step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ContractError, UndefinedKernelError
from .flow import DEFAULT_T_MIN
from .grpo import annealed_sigma
from .net import adamw_step, global_norm
from .sde import sde_rollout, trajectory_kl


@dataclass(frozen=True)
class ValueTrackerEntry:
    mu: float
    var: float
    n: int = 0

    @property
    def sigma(self):
        return math.sqrt(self.var)


@dataclass(frozen=True)
class TrackerConfig:
    obs_var: float = 0.25
    alpha: float = 1.0
    init_mu: float = 0.5
    init_var: float = 1.0

    def __post_init__(self):
        if self.obs_var <= 0 or self.init_var <= 0 or self.alpha < 0:
            raise ConfigurationError("obs_var and init_var must be positive, alpha non-negative")

    def fresh_entry(self):
        return ValueTrackerEntry(self.init_mu, self.init_var, 0)


def tracker_update(entry, r, Q, cfg):
    """Kalman step: ``K = var/(var+obs_var)``, ``mu += K (r - mu)``, ``var = (1-K) var + Q``."""
    if Q < 0:
        raise ContractError("process noise Q must be non-negative")
    if not math.isfinite(r):
        raise ContractError("reward must be finite")
    K = entry.var / (entry.var + cfg.obs_var)
    return ValueTrackerEntry(entry.mu + K * (r - entry.mu), (1.0 - K) * entry.var + Q, entry.n + 1)


def kl_process_noise(net, theta_before, theta_after, traj, cfg):
    return cfg.alpha * trajectory_kl(net, theta_before, theta_after, traj)


@dataclass(frozen=True)
class AdvantageNormalizer:
    mu_A: float = 0.0
    var_A: float = 1.0
    lam: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0 or self.eps <= 0 or self.var_A <= 0:
            raise ConfigurationError("need 0 < lambda < 1, eps > 0, var_A > 0")


def normalize_advantage(norm, A):
    """Standardise ``A`` with the current EMA statistics, then fold ``A`` into them."""
    A_tilde = (A - norm.mu_A) / (math.sqrt(norm.var_A) + norm.eps)
    mu = norm.lam * norm.mu_A + (1.0 - norm.lam) * A
    var = norm.lam * norm.var_A + (1.0 - norm.lam) * (A - mu) ** 2
    return A_tilde, replace(norm, mu_A=mu, var_A=max(var, norm.eps ** 2))


@dataclass(frozen=True)
class CurriculumState:
    sigma: np.ndarray
    n: np.ndarray
    eta: float = 1.0
    conditions: tuple = ()

    @classmethod
    def from_tracker(cls, tracker, conditions, eta, tracker_cfg=TrackerConfig()):
        entries = [tracker.get(c, tracker_cfg.fresh_entry()) for c in conditions]
        return cls(np.array([e.sigma for e in entries]), np.array([e.n for e in entries]),
                   eta, tuple(conditions))


def curriculum_probs(state):
    """``p(c) proportional to sigma_c + eta / sqrt(n_c + 1)``; uniform if all weights vanish."""
    w = np.asarray(state.sigma, dtype=np.float64) + state.eta / np.sqrt(np.asarray(state.n) + 1.0)
    total = w.sum()
    if total <= 0:
        return np.full(len(w), 1.0 / len(w))
    return w / total


def curriculum_sample(state, rng):
    if len(state.sigma) == 0:
        raise ContractError("no conditions to sample")
    idx = int(rng.choice(len(state.sigma), p=curriculum_probs(state)))
    return state.conditions[idx] if state.conditions else idx


def surprise_weight(r, entry, gamma, eps=1e-8):
    return 1.0 + gamma * abs(r - entry.mu) / (entry.sigma + eps)


def mpo_loss_and_grad(net, theta, traj, c, weight, t_min=DEFAULT_T_MIN):
    """``weight * mean_k ||v_theta(z_k, t_k, c) - (z_k - z_0)/t_k||^2`` with z_0 the endpoint.

    ``weight`` is a constant (no gradient flows through it).
    """
    if np.any(traj.t < t_min):
        raise ContractError("stored step lies below t_min")
    z0 = traj.x_final
    u = (traj.x - z0) / traj.t[:, None]
    S = traj.n_steps
    if weight == 0.0:
        return 0.0, np.zeros(net.spec.num_params)
    v, cache = net.forward(theta, traj.x, traj.t, np.full(S, c))
    r = v - u
    loss = float(weight * np.sum(r * r) / S)
    grad = net.backward(theta, cache, (2.0 * weight / S) * r)
    return loss, grad


@dataclass
class MpoConfig:
    gamma: float = 0.5
    adv_clip: float = 3.0
    steps: int = 12
    sigma_start: float = 0.1
    sigma_floor: float = 1e-4
    total_iterations: int = 300
    eta: float = 1.0
    lam: float = 0.99
    norm_eps: float = 1e-8
    weight_eps: float = 1e-8
    score_correction: bool = False
    tracker: TrackerConfig = field(default_factory=TrackerConfig)

    def __post_init__(self):
        if self.gamma < 0 or self.adv_clip <= 0 or self.sigma_start < 0:
            raise ConfigurationError("gamma >= 0, adv_clip > 0 and sigma_start >= 0 required")

    def sigma_at(self, iteration):
        return annealed_sigma(iteration, self.total_iterations, self.sigma_start, self.sigma_floor)


@dataclass
class MpoState:
    tracker: dict
    normalizer: AdvantageNormalizer
    trajectories: int = 0
    optimizer_steps: int = 0

    @classmethod
    def create(cls, cfg, conditions=()):
        return cls({c: cfg.tracker.fresh_entry() for c in conditions},
                   AdvantageNormalizer(lam=cfg.lam, eps=cfg.norm_eps))

    def tracker_table(self):
        return {str(c): {"mu": e.mu, "var": e.var, "n": e.n} for c, e in sorted(self.tracker.items())}


def mpo_train_iteration(net, theta, opt_state, cfg, state, conditions, reward_fn, iteration, seed=0):
    """One curriculum draw, one trajectory, one optimizer step, one tracker update.

    ``reward_fn(x, c)`` scores a single final state. Mutates ``state`` and returns
    ``(theta, opt_state, metrics)``.
    """
    sigma = cfg.sigma_at(iteration)
    if sigma <= 0:
        raise UndefinedKernelError("MPO needs sigma > 0 for the KL process noise")
    cur = CurriculumState.from_tracker(state.tracker, conditions, cfg.eta, cfg.tracker)
    c = curriculum_sample(cur, np.random.default_rng([seed, iteration, 0]))
    entry = state.tracker.get(c, cfg.tracker.fresh_entry())

    traj = sde_rollout(net, theta, c, cfg.steps, sigma, np.random.default_rng([seed, iteration, 1]),
                       score_correction=cfg.score_correction)
    state.trajectories += 1
    r = float(reward_fn(traj.x_final, c))

    raw_A = r - entry.mu
    norm_A, state.normalizer = normalize_advantage(state.normalizer, raw_A)
    norm_A = float(np.clip(norm_A, -cfg.adv_clip, cfg.adv_clip))
    w_c = surprise_weight(r, entry, cfg.gamma, cfg.weight_eps)
    loss, grad = mpo_loss_and_grad(net, theta, traj, c, w_c * norm_A)
    theta_new, opt_state = adamw_step(opt_state, theta, grad)
    state.optimizer_steps += 1

    Q = kl_process_noise(net, theta, theta_new, traj, cfg.tracker)
    new_entry = tracker_update(entry, r, Q, cfg.tracker)
    state.tracker[c] = new_entry
    metrics = {
        "iteration": iteration, "condition": c, "reward": r, "raw_A": raw_A, "norm_A": norm_A,
        "w_c": w_c, "Q": Q, "mu_c": new_entry.mu, "var_c": new_entry.var,
        "grad_norm": global_norm(grad), "g_t": sigma, "loss": loss,
    }
    return theta_new, opt_state, metrics

"""Group-relative policy optimisation over SDE rollouts of the flow policy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .net import adamw_step, global_norm
from .sde import sde_rollout_batch, stack_steps, transition_logprob, transition_logprob_backward

STD_GUARD = 1e-8


@dataclass(frozen=True)
class Group:
    condition: int
    trajectories: tuple
    rewards: np.ndarray
    advantages: np.ndarray


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    inner_epochs: int = 1
    steps: int = 12
    sigma_start: float = 0.1
    sigma_floor: float = 1e-4
    total_iterations: int = 300
    groups_per_iteration: int = 8

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigurationError("group_size must be >= 2")
        if self.clip_eps <= 0 or self.inner_epochs < 1 or self.steps < 1:
            raise ConfigurationError("clip_eps > 0, inner_epochs >= 1 and steps >= 1 required")

    def sigma_at(self, iteration):
        return annealed_sigma(iteration, self.total_iterations, self.sigma_start, self.sigma_floor)


def annealed_sigma(iteration, total, start, floor):
    """Linear anneal from ``start`` towards 0 over ``total`` iterations, floored."""
    frac = min(max(iteration / max(total, 1), 0.0), 1.0)
    return max(start * (1.0 - frac), floor)


def group_advantages(rewards):
    """``(r - mean) / std`` with the population std; all zeros if std < 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ContractError("need at least two rewards per group")
    std = r.std()
    if std < STD_GUARD:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def make_group(condition, trajectories, rewards):
    rewards = np.asarray(rewards, dtype=np.float64)
    trajs = tuple(tr.with_reward(r) for tr, r in zip(trajectories, rewards))
    return Group(int(condition), trajs, rewards, group_advantages(rewards))


def grpo_loss_and_grad(net, theta, groups, cfg, stats=None):
    """Clipped surrogate averaged over groups, trajectories and steps, and its gradient.

    Ratios compare ``theta`` with the log-probabilities stored in each trajectory
    (recorded under the sampling policy). Returns the objective to be maximised and
    its gradient; callers descend on the negation.
    """
    if not groups:
        raise ContractError("no groups")
    trajs, adv, weight = [], [], []
    for g in groups:
        G = len(g.trajectories)
        for tr, a in zip(g.trajectories, g.advantages):
            trajs.append(tr)
            adv.append(np.full(tr.n_steps, a))
            # mean over steps, then trajectories, then groups
            weight.append(np.full(tr.n_steps, 1.0 / (len(groups) * G * tr.n_steps)))
    adv, weight = np.concatenate(adv), np.concatenate(weight)
    s = stack_steps(trajs)
    lp, aux = transition_logprob(net, theta, s["x"], s["t"], s["c"], s["sigma"], s["dt"],
                                 s["x_next"], s["score"])
    ratio = np.exp(lp - s["logprob"])
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    unclipped_term, clipped_term = ratio * adv, clipped * adv
    # gradient flows through the unclipped branch wherever it attains the min
    live = unclipped_term <= clipped_term
    objective = float(np.sum(weight * np.minimum(unclipped_term, clipped_term)))
    upstream = np.where(live, weight * adv * ratio, 0.0)
    grad = transition_logprob_backward(net, theta, aux, upstream)
    if stats is not None:
        stats.update(mean_ratio=float(np.mean(ratio)),
                     clip_fraction=float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)))
    return objective, grad


def collect_groups(net, theta, cfg, conditions, reward_fn, iteration, seed, sigma):
    groups = []
    for slot, c in enumerate(conditions):
        rngs = [np.random.default_rng([seed, iteration, slot, c, i]) for i in range(cfg.group_size)]
        trajs = sde_rollout_batch(net, theta, np.full(cfg.group_size, c), cfg.steps, sigma, rngs)
        finals = np.stack([tr.x_final for tr in trajs])
        groups.append(make_group(c, trajs, reward_fn(finals, np.full(cfg.group_size, c))))
    return groups


def grpo_train_iteration(net, theta, opt_state, cfg, conditions, reward_fn, iteration, seed=0):
    """Roll groups under a frozen snapshot, score them, then take ``inner_epochs`` steps.

    ``conditions`` lists the condition id of each group this iteration;
    ``reward_fn(x, c)`` maps final states to rewards. Returns
    ``(theta, opt_state, metrics, groups)``.
    """
    sigma = cfg.sigma_at(iteration)
    if sigma <= 0:
        raise ConfigurationError("GRPO needs sigma > 0")
    theta_old = theta.copy()
    groups = collect_groups(net, theta_old, cfg, conditions, reward_fn, iteration, seed, sigma)
    stats, norms = {}, []
    for _ in range(cfg.inner_epochs):
        objective, grad = grpo_loss_and_grad(net, theta, groups, cfg, stats)
        norms.append(global_norm(grad))
        theta, opt_state = adamw_step(opt_state, theta, -grad)
    rewards = np.concatenate([g.rewards for g in groups])
    metrics = {
        "iteration": iteration,
        "mean_reward": float(rewards.mean()),
        "std_reward": float(rewards.std()),
        "mean_ratio": stats["mean_ratio"],
        "clip_fraction": stats["clip_fraction"],
        "grad_norm": norms[-1],
        "sigma": sigma,
        "objective": objective,
    }
    return theta, opt_state, metrics, groups

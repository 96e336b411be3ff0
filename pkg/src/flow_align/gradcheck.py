"""Central finite-difference checks for every training loss in the package."""

from __future__ import annotations

import numpy as np

from .dpo import DpoConfig, PreferencePair, dpo_loss_and_grad
from .flow import TimestepSampler, fm_loss_and_grad
from .grpo import GrpoConfig, grpo_loss_and_grad, make_group
from .mpo import mpo_loss_and_grad
from .net import NetworkSpec, VelocityNet
from .sde import sde_rollout_batch

LOSSES = ("fm", "dpo", "grpo", "mpo")


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def directional_check(f, theta, grad, direction, h):
    """Compare ``grad . d`` with ``(f(theta + h d) - f(theta - h d)) / 2h``."""
    fd = (f(theta + h * direction) - f(theta - h * direction)) / (2.0 * h)
    an = float(grad @ direction)
    return an, fd, relative_error(an, fd)


def random_spec(rng):
    depth = int(rng.integers(1, 3))
    widths = tuple(int(w) for w in rng.integers(3, 9, depth))
    return NetworkSpec.for_data(data_dim=int(rng.integers(1, 4)), hidden_widths=widths,
                                time_embed_dim=2 * int(rng.integers(1, 4)),
                                condition_count=int(rng.integers(1, 4)),
                                condition_embed_dim=int(rng.integers(1, 4)))


def loss_closure(kind, net, theta, rng):
    """Freeze all randomness of one loss; return ``f(theta) -> (value, grad)``."""
    spec = net.spec
    d, K = spec.data_dim, spec.condition_count
    B = 5
    if kind == "fm":
        x0 = rng.standard_normal((B, d))
        c = rng.integers(0, K, B)
        t = rng.uniform(0.05, 0.95, B)
        eps = rng.standard_normal((B, d))
        sampler = TimestepSampler("uniform")
        return lambda th: fm_loss_and_grad(net, th, x0, c, sampler, None, t=t, eps=eps)
    if kind == "dpo":
        pairs = [PreferencePair(int(rng.integers(0, K)), rng.standard_normal(d), rng.standard_normal(d))
                 for _ in range(B)]
        ref = theta + 0.05 * rng.standard_normal(theta.size)
        cfg = DpoConfig(ref, beta_eff=float(rng.uniform(0.5, 5.0)), skip_factor=None)
        t = rng.uniform(0.05, 0.95, B)
        ew, el = rng.standard_normal((B, d)), rng.standard_normal((B, d))
        return lambda th: dpo_loss_and_grad(net, th, cfg, pairs, None, t=t, eps_w=ew, eps_l=el)
    if kind == "grpo":
        cfg = GrpoConfig(group_size=3, steps=3)
        # old policy a small step away so ratios sit strictly inside the clip band
        theta_old = theta + 1e-3 * rng.standard_normal(theta.size)
        groups = []
        for c in range(min(K, 2)):
            rngs = [np.random.default_rng(rng.integers(1 << 31)) for _ in range(cfg.group_size)]
            trajs = sde_rollout_batch(net, theta_old, np.full(cfg.group_size, c), cfg.steps, 0.3, rngs)
            groups.append(make_group(c, trajs, rng.uniform(0, 1, cfg.group_size)))
        return lambda th: grpo_loss_and_grad(net, th, groups, cfg)
    if kind == "mpo":
        c = int(rng.integers(0, K))
        traj = sde_rollout_batch(net, theta, np.array([c]), 4, 0.2,
                                 [np.random.default_rng(rng.integers(1 << 31))], score_correction=False)[0]
        w = float(rng.uniform(-2.0, 2.0))
        return lambda th: mpo_loss_and_grad(net, th, traj, c, w)
    raise ValueError(f"unknown loss {kind!r}")


def check_one(kind, seed, h=1e-5, directions=3):
    rng = np.random.default_rng([seed, LOSSES.index(kind)])
    net = VelocityNet(random_spec(rng))
    theta = net.init_params(int(rng.integers(1 << 31)))
    f = loss_closure(kind, net, theta, rng)
    _, grad = f(theta)
    value = lambda th: f(th)[0]
    errs = []
    for _ in range(directions):
        dvec = rng.standard_normal(theta.size)
        dvec /= np.linalg.norm(dvec)
        errs.append(directional_check(value, theta, grad, dvec, h)[2])
    # plus the single largest-gradient coordinate
    e = np.zeros(theta.size)
    e[int(np.argmax(np.abs(grad)))] = 1.0
    errs.append(directional_check(value, theta, grad, e, h)[2])
    return {"loss": kind, "seed": seed, "num_params": int(theta.size), "max_rel_error": max(errs)}


def run_gradcheck(configs=20, h=1e-5, seed=0):
    """Check ``configs`` random small configurations, cycling through the losses."""
    cases = [check_one(LOSSES[i % len(LOSSES)], seed * 100003 + i, h) for i in range(configs)]
    return {"cases": cases, "max_rel_error": max(c["max_rel_error"] for c in cases)}

"""Rectified-flow training objective, timestep samplers and the Euler ODE sampler.

Time runs from t=1 (pure noise) to t=0 (data): ``x_t = (1 - t) x0 + t eps`` and the
target velocity is ``u = eps - x0``. Sampling integrates with negative steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DivergenceError, DomainError

DEFAULT_T_MIN = 1e-3


@dataclass(frozen=True)
class FlowSample:
    x0: np.ndarray
    eps: np.ndarray
    t: float
    xt: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class TimestepSampler:
    """``kind`` is ``"logit_normal"`` (with location ``m`` and scale ``s``) or ``"uniform"``."""

    kind: str = "logit_normal"
    m: float = 0.0
    s: float = 1.0
    t_min: float = DEFAULT_T_MIN

    def __post_init__(self):
        if self.kind not in ("logit_normal", "uniform"):
            raise ConfigurationError(f"unknown timestep sampler {self.kind!r}")
        if not 0.0 < self.t_min <= 0.1:
            raise ConfigurationError("t_min must lie in (0, 0.1]")
        if self.kind == "logit_normal" and self.s <= 0:
            raise ConfigurationError("logit-normal scale must be positive")


def interpolate(x0, eps, t):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise DomainError("interpolation time must lie in (0, 1]")
    tt = t[..., None] if t.ndim else t
    return FlowSample(x0=x0, eps=eps, t=t, xt=(1.0 - tt) * x0 + tt * eps, u=eps - x0)


def sample_timestep(sampler, rng, size=None):
    """Draw ``t`` in ``[t_min, 1)``."""
    if sampler.kind == "uniform":
        return sampler.t_min + (1.0 - sampler.t_min) * rng.random(size)
    z = rng.normal(sampler.m, sampler.s, size)
    t = 1.0 / (1.0 + np.exp(-z))
    return np.clip(t, sampler.t_min, 1.0 - 1e-6)


def fm_loss_and_grad(net, theta, x0, c, sampler, rng, t=None, eps=None):
    """Mean over the batch of ``||v_theta(x_t, t, c) - u||^2`` and its exact gradient.

    ``t`` and ``eps`` are drawn from ``sampler`` and a standard normal unless given.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    B = x0.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if t is None:
        t = sample_timestep(sampler, rng, B)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    fs = interpolate(x0, np.atleast_2d(eps), t)
    v, cache = net.forward(theta, fs.xt, t, c)
    r = v - fs.u
    loss = float(np.sum(r * r) / B)
    grad = net.backward(theta, cache, 2.0 * r / B)
    return loss, grad


def time_grid(steps, t_min=DEFAULT_T_MIN):
    """Times ``1 = t_0 > t_1 > ... > t_steps = t_min`` and the (negative) step size."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    dt = -(1.0 - t_min) / steps
    ts = 1.0 + dt * np.arange(steps + 1)
    ts[-1] = t_min
    return ts, dt


def ode_sample(net, theta, c, steps, rng=None, eps=None, t_min=DEFAULT_T_MIN):
    """Euler-integrate the learned ODE from noise at t=1 down to ``t_min``.

    Returns ``(x0_hat, path)`` where ``path`` has shape ``(steps + 1, *eps.shape)``.
    Pass either ``rng`` (one standard-normal point per condition entry) or ``eps``.
    """
    ts, dt = time_grid(steps, t_min)
    if eps is None:
        n = np.size(c)
        eps = rng.standard_normal((n, net.spec.data_dim)) if np.ndim(c) else rng.standard_normal(net.spec.data_dim)
    x = np.array(eps, dtype=np.float64)
    path = [x.copy()]
    for k in range(steps):
        x = x + net(theta, x, ts[k], c) * dt
        if not np.all(np.isfinite(x)):
            raise DivergenceError("ODE state became non-finite", step=k)
        path.append(x.copy())
    return x, np.stack(path)

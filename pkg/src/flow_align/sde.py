"""Stochastic sampling of the flow model and per-step transition densities.

The reverse-time SDE adds the score term to the velocity,

    drift = v + sigma^2 / (2 t) * (x + (1 - t) v),

and is discretised with Euler-Maruyama using negative ``dt`` and noise scale
``sigma * sqrt(|dt|)``. With ``score_correction=False`` the drift is the bare
velocity (the single-trajectory variant samples that way).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivergenceError, DomainError, UndefinedKernelError
from .flow import DEFAULT_T_MIN, time_grid

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class StepRecord:
    t: float
    x: np.ndarray
    drift: np.ndarray
    sigma: float
    dt: float
    noise: np.ndarray
    x_next: np.ndarray
    logprob: float

    def to_dict(self):
        return {
            "t": self.t, "x": self.x.tolist(), "drift": self.drift.tolist(), "sigma": self.sigma,
            "dt": self.dt, "noise": self.noise.tolist(), "x_next": self.x_next.tolist(),
            "logprob": self.logprob,
        }


@dataclass(frozen=True)
class Trajectory:
    """One rollout, stored as per-step arrays (row ``k`` is step ``k``)."""

    condition: int
    t: np.ndarray
    x: np.ndarray
    drift: np.ndarray
    sigma: np.ndarray
    dt: float
    noise: np.ndarray
    x_next: np.ndarray
    logprob: np.ndarray
    score_correction: bool = True
    reward: float | None = None

    @property
    def x_final(self):
        return self.x_next[-1]

    @property
    def n_steps(self):
        return self.t.shape[0]

    @property
    def total_logprob(self):
        return float(np.sum(self.logprob))

    @property
    def steps(self):
        return [
            StepRecord(float(self.t[k]), self.x[k], self.drift[k], float(self.sigma[k]), self.dt,
                       self.noise[k], self.x_next[k], float(self.logprob[k]))
            for k in range(self.n_steps)
        ]

    def with_reward(self, reward):
        return Trajectory(self.condition, self.t, self.x, self.drift, self.sigma, self.dt, self.noise,
                          self.x_next, self.logprob, self.score_correction, float(reward))

    def is_chain_consistent(self):
        if not np.array_equal(self.x[1:], self.x_next[:-1]):
            return False
        recomputed = step_update(self.x, self.drift, self.sigma, self.dt, self.noise)
        return bool(np.array_equal(recomputed, self.x_next))


def _as_col(a, B):
    return np.broadcast_to(np.asarray(a, dtype=np.float64), (B,))[:, None]


def drift_from_velocity(v, x, t, sigma, score_correction=True):
    """``v + sigma^2/(2t) (x + (1-t) v)``; exactly ``v`` when sigma is zero."""
    if not score_correction:
        return v
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.all(sigma == 0.0):
        return v
    B = np.atleast_2d(v).shape[0]
    s2, t = _as_col(sigma ** 2, B), _as_col(t, B)
    out = np.atleast_2d(v) + s2 / (2.0 * t) * (np.atleast_2d(x) + (1.0 - t) * np.atleast_2d(v))
    return out[0] if np.ndim(v) == 1 else out


def drift(net, theta, x, t, c, sigma, score_correction=True, t_min=DEFAULT_T_MIN):
    if np.any(np.asarray(t) < t_min):
        raise DomainError(f"drift evaluated below t_min={t_min}")
    v = net(theta, x, t, c)
    return drift_from_velocity(v, x, t, sigma, score_correction)


def step_update(x, drift_, sigma, dt, noise):
    """Euler-Maruyama update; the noise term is skipped entirely where sigma is zero."""
    out = np.asarray(x, dtype=np.float64) + drift_ * dt
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim == 0:
        return out if sigma == 0.0 else out + sigma * np.sqrt(abs(dt)) * noise
    scale = sigma * np.sqrt(abs(dt))
    live = sigma != 0.0
    out[live] = out[live] + scale[live, None] * noise[live]
    return out


def gaussian_logpdf(x_next, mean, sigma, dt):
    """Log density of an isotropic Gaussian with per-coordinate variance ``sigma^2 |dt|``.

    Rows with ``sigma == 0`` get log-probability 0 by convention.
    """
    x_next = np.atleast_2d(x_next)
    mean = np.atleast_2d(mean)
    B, d = x_next.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (B,))
    out = np.zeros(B)
    live = sigma > 0.0
    if np.any(live):
        var = sigma[live] ** 2 * abs(dt)
        r = x_next[live] - mean[live]
        out[live] = -0.5 * (np.sum(r * r, axis=1) / var + d * (LOG_2PI + np.log(var)))
    return out


def sde_step(net, theta, x, t, c, sigma, dt, rng=None, noise=None, score_correction=True,
             t_min=DEFAULT_T_MIN):
    """Single Euler-Maruyama step from ``(x, t)`` returning a :class:`StepRecord`."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if noise is None:
        noise = rng.standard_normal(x.shape)
    noise = np.asarray(noise, dtype=np.float64)
    d_ = drift(net, theta, x, t, c, sigma, score_correction, t_min)
    x_next = step_update(x, d_, sigma, dt, noise)
    if not np.all(np.isfinite(x_next)):
        raise DivergenceError("SDE state became non-finite")
    lp = float(gaussian_logpdf(x_next, x + d_ * dt, sigma, dt)[0])
    return StepRecord(float(t), x, d_, float(sigma), float(dt), noise, x_next, lp)


def _sigma_per_step(sigma, steps):
    s = np.asarray(sigma, dtype=np.float64)
    s = np.full(steps, float(s)) if s.ndim == 0 else s
    if s.shape != (steps,):
        raise ContractError(f"sigma schedule needs {steps} entries, got {s.shape}")
    if np.any(s < 0):
        raise ContractError("sigma must be non-negative")
    return s


def sde_rollout_batch(net, theta, conditions, steps, sigma, rngs, score_correction=True,
                      t_min=DEFAULT_T_MIN):
    """Roll several independent trajectories in lock-step.

    Each trajectory draws its initial point and then its per-step noise from its
    own generator in ``rngs``, so results do not depend on how rollouts are batched.
    """
    conditions = np.asarray(conditions, dtype=np.int64)
    B, d = conditions.shape[0], net.spec.data_dim
    if len(rngs) != B:
        raise ContractError("one generator per trajectory required")
    sig = _sigma_per_step(sigma, steps)
    ts, dt = time_grid(steps, t_min)
    draws = [(r.standard_normal(d), r.standard_normal((steps, d))) for r in rngs]
    x = np.stack([e for e, _ in draws])
    noise = np.stack([n for _, n in draws], axis=1)  # (steps, B, d)
    xs, drifts, nexts, lps = [], [], [], []
    for k in range(steps):
        t = ts[k]
        v = net(theta, x, t, conditions)
        dr = drift_from_velocity(v, x, t, sig[k], score_correction)
        x_next = step_update(x, dr, sig[k], dt, noise[k])
        if not np.all(np.isfinite(x_next)):
            raise DivergenceError("SDE state became non-finite", step=k)
        xs.append(x)
        drifts.append(dr)
        nexts.append(x_next)
        lps.append(gaussian_logpdf(x_next, x + dr * dt, sig[k], dt))
        x = x_next
    xs, drifts, nexts, lps = (np.stack(a, axis=1) for a in (xs, drifts, nexts, lps))
    return [
        Trajectory(int(conditions[b]), ts[:-1].copy(), xs[b], drifts[b], sig.copy(), dt,
                   noise[:, b], nexts[b], lps[b], score_correction)
        for b in range(B)
    ]


def sde_rollout(net, theta, c, steps, sigma, rng, score_correction=True, t_min=DEFAULT_T_MIN):
    """One trajectory from ``x ~ N(0, I)`` at t=1 down to ``t_min``."""
    return sde_rollout_batch(net, theta, [c], steps, sigma, [rng], score_correction, t_min)[0]


def stack_steps(trajectories):
    """Flatten the steps of several trajectories into batched arrays."""
    cat = np.concatenate
    return {
        "x": cat([tr.x for tr in trajectories]),
        "t": cat([tr.t for tr in trajectories]),
        "c": cat([np.full(tr.n_steps, tr.condition, dtype=np.int64) for tr in trajectories]),
        "sigma": cat([tr.sigma for tr in trajectories]),
        "dt": np.concatenate([np.full(tr.n_steps, tr.dt) for tr in trajectories]),
        "x_next": cat([tr.x_next for tr in trajectories]),
        "logprob": cat([tr.logprob for tr in trajectories]),
        "score": cat([np.full(tr.n_steps, tr.score_correction) for tr in trajectories]),
    }


def transition_logprob(net, theta, x, t, c, sigma, dt, x_next, score_correction=True):
    """Batched log-density of stored transitions under ``theta``.

    Returns ``(logprob, aux)`` where ``aux`` carries what a caller needs to chain
    ``d logprob / d theta`` through :func:`transition_logprob_backward`.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise UndefinedKernelError("transition density undefined for sigma = 0")
    x = np.atleast_2d(x)
    B = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (B,))
    sigma = np.broadcast_to(sigma, (B,))
    score = np.broadcast_to(np.asarray(score_correction, dtype=bool), (B,))
    v, cache = net.forward(theta, x, t, c)
    corr = np.where(score, sigma ** 2 / (2.0 * t), 0.0)
    gain = 1.0 + corr * (1.0 - t)
    dr = v + corr[:, None] * (x + (1.0 - t)[:, None] * v)
    var = sigma ** 2 * np.abs(dt)
    resid = np.atleast_2d(x_next) - (x + dr * dt[:, None])
    d = x.shape[1]
    lp = -0.5 * (np.sum(resid * resid, axis=1) / var + d * (LOG_2PI + np.log(var)))
    aux = {"cache": cache, "gain": gain, "resid": resid, "var": var, "dt": dt, "drift": dr}
    return lp, aux


def transition_logprob_backward(net, theta, aux, upstream, per_sample=False):
    """Gradient of ``sum_i upstream_i * logprob_i`` with respect to theta."""
    # d lp / d drift = resid * dt / var; d drift / d v = gain
    coef = np.asarray(upstream, dtype=np.float64) * aux["gain"] * aux["dt"] / aux["var"]
    return net.backward(theta, aux["cache"], coef[:, None] * aux["resid"], per_sample=per_sample)


def step_logprob_under(net, theta, record, c, score_correction=True):
    """Log-density of ``record.x_next`` under the kernel induced by ``theta`` at ``record.x``."""
    if record.sigma <= 0.0:
        raise UndefinedKernelError("transition density undefined for sigma = 0")
    lp, _ = transition_logprob(net, theta, record.x[None], record.t, np.array([c]), record.sigma,
                               record.dt, record.x_next[None], score_correction)
    return float(lp[0])


def trajectory_logprobs(net, theta, traj):
    """Per-step log-densities of a stored trajectory under ``theta``."""
    lp, _ = transition_logprob(net, theta, traj.x, traj.t, np.full(traj.n_steps, traj.condition),
                               traj.sigma, traj.dt, traj.x_next, traj.score_correction)
    return lp


def trajectory_kl(net, theta_old, theta_new, traj):
    """Mean over steps of ``||(drift_old - drift_new) dt||^2 / (2 sigma^2 |dt|)``."""
    if np.any(traj.sigma <= 0.0):
        raise UndefinedKernelError("KL undefined for sigma = 0 steps")
    c = np.full(traj.n_steps, traj.condition)
    d_old = drift_from_velocity(net(theta_old, traj.x, traj.t, c), traj.x, traj.t, traj.sigma,
                                traj.score_correction)
    d_new = drift_from_velocity(net(theta_new, traj.x, traj.t, c), traj.x, traj.t, traj.sigma,
                                traj.score_correction)
    diff = (d_old - d_new) * traj.dt
    per_step = np.sum(diff * diff, axis=1) / (2.0 * traj.sigma ** 2 * abs(traj.dt))
    return float(np.mean(per_step))


def dump_trajectory(traj, fh):
    """Write one JSON object per step to an open text file."""
    for rec in traj.steps:
        fh.write(json.dumps(rec.to_dict()) + "\n")

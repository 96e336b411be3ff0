"""Preference pairs and the Diffusion-DPO objective for a flow-matching policy."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError
from .flow import TimestepSampler, interpolate, sample_timestep
from .net import atomic_write_text

POSITIVE_SCORES = (4, 5)
NEGATIVE_SCORES = (1, 2)


@dataclass(frozen=True)
class ScoredCandidate:
    condition: int
    x0: np.ndarray
    score: int
    prompt: int | None = None  # candidates sharing a prompt form pairs; defaults to condition

    def __post_init__(self):
        if self.score not in (1, 2, 3, 4, 5):
            raise ContractError(f"score must be an integer in 1..5, got {self.score!r}")

    @property
    def group(self):
        return self.condition if self.prompt is None else self.prompt


@dataclass(frozen=True)
class PreferencePair:
    condition: int
    winner_x0: np.ndarray
    loser_x0: np.ndarray


@dataclass
class DpoConfig:
    reference_params: np.ndarray
    beta_eff: float = 100.0
    t_sampler: TimestepSampler = field(default_factory=lambda: TimestepSampler("uniform"))
    # drop pairs whose own gradient norm exceeds this multiple of the batch median
    skip_factor: float | None = 10.0

    def __post_init__(self):
        if self.beta_eff <= 0:
            raise ContractError("beta_eff must be positive")
        self.reference_params = np.array(self.reference_params, dtype=np.float64)
        self.reference_params.setflags(write=False)


def build_pairs(candidates):
    """Every positive (score 4-5) times every negative (score 1-2) within a prompt group."""
    groups = defaultdict(list)
    for cand in candidates:
        groups[(cand.group, cand.condition)].append(cand)
    pairs = []
    for (_, cond), items in groups.items():
        wins = [c for c in items if c.score in POSITIVE_SCORES]
        losses = [c for c in items if c.score in NEGATIVE_SCORES]
        pairs.extend(PreferencePair(cond, np.asarray(w.x0, dtype=np.float64),
                                    np.asarray(l.x0, dtype=np.float64))
                     for w in wins for l in losses)
    return pairs


def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def dpo_loss_and_grad(net, theta, cfg, pairs, rng, t=None, eps_w=None, eps_l=None, stats=None):
    """Mean over pairs of ``-log sigmoid(-beta (dW - dL))`` and its gradient.

    ``dW = ||u_w - v_theta(x_t^w)||^2 - ||u_w - v_ref(x_t^w)||^2`` and likewise for
    the loser. One timestep is shared by winner and loser; their noises are
    independent. ``t``/``eps_w``/``eps_l`` override the random draws. If ``stats``
    is a dict it receives the per-batch diagnostics.
    """
    if not pairs:
        raise ContractError("empty preference batch")
    n, d = len(pairs), net.spec.data_dim
    xw = np.stack([p.winner_x0 for p in pairs])
    xl = np.stack([p.loser_x0 for p in pairs])
    c = np.array([p.condition for p in pairs], dtype=np.int64)
    if t is None:
        t = sample_timestep(cfg.t_sampler, rng, n)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if eps_w is None:
        eps_w = rng.standard_normal((n, d))
    if eps_l is None:
        eps_l = rng.standard_normal((n, d))
    fw, fl = interpolate(xw, eps_w, t), interpolate(xl, eps_l, t)
    x_all = np.concatenate([fw.xt, fl.xt])
    u_all = np.concatenate([fw.u, fl.u])
    t_all = np.concatenate([t, t])
    c_all = np.concatenate([c, c])

    v, cache = net.forward(theta, x_all, t_all, c_all)
    v_ref = net(cfg.reference_params, x_all, t_all, c_all)
    err = np.sum((v - u_all) ** 2, axis=1) - np.sum((v_ref - u_all) ** 2, axis=1)
    gap = err[:n] - err[n:]
    logit = -cfg.beta_eff * gap
    per_pair = -_log_sigmoid(logit)
    # d loss_i / d v = dl/dlogit * dlogit/d err * d err/d v, dl/dlogit = -sigmoid(-logit)
    dl_dlogit = -_sigmoid(-logit)
    sign = np.concatenate([np.full(n, -cfg.beta_eff), np.full(n, cfg.beta_eff)])
    coef = np.concatenate([dl_dlogit, dl_dlogit]) * sign
    upstream = coef[:, None] * 2.0 * (v - u_all)

    keep = np.ones(n, dtype=bool)
    if cfg.skip_factor is not None and n > 2:
        per = net.backward(theta, cache, upstream, per_sample=True)
        norms = np.linalg.norm(per[:n] + per[n:], axis=1)
        keep = norms <= cfg.skip_factor * np.median(norms)
    n_keep = int(keep.sum())
    weights = np.concatenate([keep, keep]) / n_keep
    loss = float(np.sum(per_pair[keep]) / n_keep)
    grad = net.backward(theta, cache, upstream * weights[:, None])
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise DivergenceError("non-finite DPO loss or gradient")
    if stats is not None:
        stats.update(skipped=n - n_keep, mean_logit=float(np.mean(logit[keep])),
                     accuracy=float(np.mean(gap[keep] < 0)))
    return loss, grad


def save_pairs(pairs, path):
    lines = (json.dumps({"condition": int(p.condition), "winner": p.winner_x0.tolist(),
                         "loser": p.loser_x0.tolist()}) + "\n" for p in pairs)
    atomic_write_text(path, "".join(lines))


def load_pairs(path):
    with open(path, encoding="utf-8") as f:
        return [PreferencePair(int(o["condition"]), np.array(o["winner"], dtype=np.float64),
                               np.array(o["loser"], dtype=np.float64))
                for o in map(json.loads, filter(str.strip, f))]

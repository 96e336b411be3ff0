"""Closed-form reward models on R^d, each mapping into [0, 1], plus weighted ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

KINDS = ("region", "mode_proximity", "realism")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class RewardSpec:
    """``kind`` plus its parameters.

    region:          normal, offset, temperature
    mode_proximity:  mean, scale
    realism:         means, covs, weights, bandwidth
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown reward kind {self.kind!r}")
        p = self.params
        if self.kind == "region" and p.get("temperature", 1.0) <= 0:
            raise ConfigurationError("region temperature must be positive")
        if self.kind == "mode_proximity" and p.get("scale", 1.0) <= 0:
            raise ConfigurationError("mode_proximity scale must be positive")
        if self.kind == "realism":
            w = np.asarray(p["weights"], dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigurationError("realism mixture weights must be non-negative and sum to 1")

    @classmethod
    def region(cls, normal, offset=0.0, temperature=1.0):
        return cls("region", {"normal": list(map(float, normal)), "offset": float(offset),
                              "temperature": float(temperature)})

    @classmethod
    def mode_proximity(cls, mean, scale=1.0):
        return cls("mode_proximity", {"mean": list(map(float, mean)), "scale": float(scale)})

    @classmethod
    def realism(cls, means, covs, weights, bandwidth=0.0):
        return cls("realism", {
            "means": np.asarray(means, dtype=float).tolist(),
            "covs": np.asarray(covs, dtype=float).tolist(),
            "weights": list(map(float, weights)),
            "bandwidth": float(bandwidth),
        })

    def to_dict(self):
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], dict(d.get("params", {})))

    def __call__(self, x):
        return {"region": region_reward, "mode_proximity": mode_proximity_reward,
                "realism": realism_reward}[self.kind](x, self)


def region_reward(x, spec):
    """``sigmoid((<n, x> - offset) / temperature)``."""
    p = spec.params
    z = (np.asarray(x, dtype=np.float64) @ np.asarray(p["normal"], dtype=np.float64) - p["offset"])
    return _sigmoid(z / p["temperature"])


def mode_proximity_reward(x, spec):
    p = spec.params
    r = np.asarray(x, dtype=np.float64) - np.asarray(p["mean"], dtype=np.float64)
    return np.exp(-np.sum(r * r, axis=-1) / (2.0 * p["scale"] ** 2))


def mixture_density(x, means, covs, weights):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    out = np.zeros(x.shape[0])
    for m, C, w in zip(means, covs, weights):
        C = np.asarray(C, dtype=np.float64)
        L = np.linalg.cholesky(C)
        z = np.linalg.solve(L, (x - m).T)
        log_norm = -0.5 * d * np.log(2.0 * np.pi) - np.sum(np.log(np.diag(L)))
        out += w * np.exp(log_norm - 0.5 * np.sum(z * z, axis=0))
    return out


def realism_reward(x, spec):
    """Mixture density relative to its largest value at a component mean, capped at 1."""
    p = spec.params
    means = np.asarray(p["means"], dtype=np.float64)
    d = means.shape[1]
    covs = np.asarray(p["covs"], dtype=np.float64) + p.get("bandwidth", 0.0) ** 2 * np.eye(d)
    weights = np.asarray(p["weights"], dtype=np.float64)
    peak = mixture_density(means, means, covs, weights).max()
    r = np.minimum(1.0, mixture_density(x, means, covs, weights) / peak)
    return r[0] if np.ndim(x) == 1 else r


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple  # ((RewardSpec, weight), ...)

    def __post_init__(self):
        object.__setattr__(self, "members", tuple((s, float(w)) for s, w in self.members))
        w = np.array([w for _, w in self.members])
        if not len(w) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ConfigurationError("ensemble weights must be non-negative and sum to 1")

    @classmethod
    def single(cls, spec):
        return cls(((spec, 1.0),))

    def to_dict(self):
        return {"members": [{"reward": s.to_dict(), "weight": w} for s, w in self.members]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple((RewardSpec.from_dict(m["reward"]), m["weight"]) for m in d["members"]))

    def __call__(self, x):
        total = 0.0
        for spec, w in self.members:
            total = total + w * spec(x)
        return total


def ensemble_reward(x, c, spec):
    """Weighted sum of member rewards.

    ``spec`` is an :class:`EnsembleSpec` or a per-condition sequence of them, in
    which case ``c`` (scalar or per-row array) selects the ensemble.
    """
    if isinstance(spec, EnsembleSpec):
        return spec(x)
    x = np.asarray(x, dtype=np.float64)
    if np.ndim(c) == 0:
        return spec[int(c)](x)
    c = np.asarray(c)
    out = np.empty(len(c))
    for k in np.unique(c):
        rows = c == k
        out[rows] = spec[int(k)](x[rows])
    return out


def score_candidates(rewards, rng, noise=0.1):
    """Map rewards in [0, 1] to integer 1-5 scores with Gaussian labeller noise."""
    r = np.asarray(rewards, dtype=np.float64)
    noisy = np.clip(r + rng.normal(0.0, noise, r.shape), 0.0, 1.0)
    return np.rint(1.0 + 4.0 * noisy).astype(np.int64)

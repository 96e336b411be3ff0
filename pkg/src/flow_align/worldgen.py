"""Synthetic conditional 2D targets and deterministic data-curation rules."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError


def _nested_tuple(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return tuple(_nested_tuple(e) for e in v)
    return float(v)


@dataclass(frozen=True)
class ConditionSpec:
    """Target distribution for one condition id.

    ``kind="gmm"`` uses ``means``/``covs``/``weights``; ``kind="two_moons"`` uses
    ``noise`` and ``scale``.
    """

    id: int
    kind: str = "gmm"
    means: tuple = ()
    covs: tuple = ()
    weights: tuple = ()
    noise: float = 0.1
    scale: float = 1.0
    category: str = "default"

    def __post_init__(self):
        for name in ("means", "covs", "weights"):
            object.__setattr__(self, name, _nested_tuple(getattr(self, name)))
        if self.kind == "gmm":
            means = np.asarray(self.means, dtype=np.float64)
            covs = np.asarray(self.covs, dtype=np.float64)
            w = np.asarray(self.weights, dtype=np.float64)
            if means.ndim != 2 or covs.shape != means.shape + (means.shape[1],) or w.shape != (len(means),):
                raise ConfigurationError("gmm needs means (K,d), covs (K,d,d) and weights (K,)")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigurationError("mixture weights must be non-negative and sum to 1")
            for C in covs:
                if not np.allclose(C, C.T) or np.any(np.linalg.eigvalsh(C) <= 0):
                    raise ConfigurationError("covariances must be symmetric positive definite")
        elif self.kind != "two_moons":
            raise ConfigurationError(f"unknown target kind {self.kind!r}")

    @classmethod
    def gaussian_mixture(cls, id, means, stds, weights=None, category="default"):
        means = np.asarray(means, dtype=np.float64)
        K, d = means.shape
        stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (K,))
        covs = [s ** 2 * np.eye(d) for s in stds]
        weights = np.full(K, 1.0 / K) if weights is None else weights
        return cls(id=id, kind="gmm", means=means, covs=covs, weights=weights, category=category)

    @property
    def mode_means(self):
        return np.asarray(self.means, dtype=np.float64)

    @property
    def mode_covs(self):
        return np.asarray(self.covs, dtype=np.float64)

    def to_dict(self):
        d = asdict(self)
        for k in ("means", "covs", "weights"):
            d[k] = np.asarray(d[k], dtype=float).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def sample_data(spec, n, rng):
    """``n`` i.i.d. draws from the condition's target, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.kind == "two_moons":
        return _two_moons(n, spec.noise, spec.scale, rng)
    means, covs = spec.mode_means, spec.mode_covs
    comp = rng.choice(len(means), size=n, p=np.asarray(spec.weights))
    z = rng.standard_normal((n, means.shape[1]))
    chol = np.linalg.cholesky(covs)
    return means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def _two_moons(n, noise, scale, rng):
    upper = rng.random(n) < 0.5
    ang = np.pi * rng.random(n)
    x = np.where(upper, np.cos(ang), 1.0 - np.cos(ang))
    y = np.where(upper, np.sin(ang), 0.5 - np.sin(ang))
    pts = np.stack([x - 0.5, y - 0.25], axis=1) * scale
    return pts + noise * rng.standard_normal((n, 2))


def two_gaussians(n_conditions=1, separation=2.0, std=0.3):
    """Equal-weight modes at ``(+-separation, 0)``, shared by every condition id."""
    return [ConditionSpec.gaussian_mixture(c, [[-separation, 0.0], [separation, 0.0]], std)
            for c in range(n_conditions)]


# --- curation rules ------------------------------------------------------------

@dataclass(frozen=True)
class MetadataRecord:
    width: int
    height: int
    aesthetic: float
    watermark: bool = False
    aigc: bool = False
    category: str = ""
    style: str = ""

    @property
    def aspect_ratio(self):
        return self.width / self.height


@dataclass(frozen=True)
class FilterThresholds:
    min_short_edge: int = 384
    min_aspect: float = 0.25
    max_aspect: float = 4.0
    min_aesthetic: float = 4.5


REJECT_REASONS = ("resolution", "aspect", "aesthetic", "watermark", "aigc")


def filter_record(rec, thresholds=FilterThresholds()):
    """Return ``(keep, reason)``; ``reason`` is the first failing rule or None."""
    if rec.width <= 0 or rec.height <= 0:
        return False, "resolution"
    if min(rec.width, rec.height) < thresholds.min_short_edge:
        return False, "resolution"
    if not thresholds.min_aspect <= rec.aspect_ratio <= thresholds.max_aspect:
        return False, "aspect"
    if rec.aesthetic < thresholds.min_aesthetic:
        return False, "aesthetic"
    if rec.watermark:
        return False, "watermark"
    if rec.aigc:
        return False, "aigc"
    return True, None


def read_records(path):
    fields = {f for f in MetadataRecord.__dataclass_fields__}
    with open(path, encoding="utf-8") as f:
        return [MetadataRecord(**{k: v for k, v in json.loads(line).items() if k in fields})
                for line in f if line.strip()]


def write_filter_report(records, path, thresholds=FilterThresholds()):
    """CSV with one row per outcome (``kept`` or a rejection reason) and its count."""
    counts = Counter()
    for rec in records:
        keep, reason = filter_record(rec, thresholds)
        counts["kept" if keep else reason] += 1
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["outcome", "count"])
        for key in ("kept",) + REJECT_REASONS:
            w.writerow([key, counts[key]])
    return dict(counts)


CAPTION_LEVELS = ("entity", "phrase", "composition", "photographic")
CAPTION_PROBS = (0.05, 0.1, 0.2, 0.65)


def caption_level_pick(rng=None, u=None):
    """Pick a caption granularity; ``u`` forces the uniform variate."""
    if u is None:
        u = rng.random()
    cum = np.cumsum(CAPTION_PROBS)
    idx = int(np.searchsorted(cum, u, side="right"))
    return CAPTION_LEVELS[min(idx, len(CAPTION_LEVELS) - 1)]


@dataclass
class CharStats:
    accuracy: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def record(self, symbol, correct):
        """Fold one observation into the running per-symbol accuracy."""
        n = self.counts.get(symbol, 0)
        acc = self.accuracy.get(symbol, 0.0)
        self.accuracy[symbol] = (acc * n + float(correct)) / (n + 1)
        self.counts[symbol] = n + 1


def dynamic_char_weights(stats, exponent=1.0, phase_out_threshold=0.95, base_ratio=0.5):
    """Sampling weights favouring error-prone symbols, and the synthetic-data ratio.

    Weights are proportional to ``(1 - accuracy) ** exponent``. The synthetic ratio is
    ``base_ratio * mean error`` and drops to exactly 0 once every symbol reaches
    ``phase_out_threshold``.
    """
    if not stats.accuracy:
        raise ValueError("need at least one symbol")
    symbols = list(stats.accuracy)
    acc = np.array([stats.accuracy[s] for s in symbols], dtype=np.float64)
    if np.any(acc < 0) or np.any(acc > 1):
        raise ValueError("accuracies must lie in [0, 1]")
    raw = (1.0 - acc) ** exponent
    total = raw.sum()
    w = raw / total if total > 0 else np.full(len(symbols), 1.0 / len(symbols))
    ratio = 0.0 if acc.min() >= phase_out_threshold else base_ratio * float(np.mean(1.0 - acc))
    return dict(zip(symbols, w.tolist())), ratio

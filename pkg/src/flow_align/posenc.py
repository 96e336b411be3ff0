"""Three-axis rotary position embedding (modality, row, column)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, ContractError

MODALITY_TEXT = 0
MODALITY_NOISE = 1
MODALITY_REFERENCE = 2


class Position3(NamedTuple):
    m: int
    y: int
    x: int


def default_split(head_dim):
    """Channel pairs for (modality, y, x) in roughly 1:1:2 proportion."""
    if head_dim % 2:
        raise ConfigurationError("head_dim must be even")
    pairs = head_dim // 2
    d_m = d_y = max(1, round(pairs / 4))
    d_x = pairs - d_m - d_y
    if d_x < 1:
        raise ConfigurationError(f"head_dim {head_dim} too small for a three-axis split")
    return (d_m, d_y, d_x)


@dataclass(frozen=True)
class RotaryConfig:
    head_dim: int
    split: tuple | None = None
    base: float = 10000.0

    def __post_init__(self):
        if self.split is None:
            object.__setattr__(self, "split", default_split(self.head_dim))
        if len(self.split) != 3 or any(s < 0 for s in self.split):
            raise ConfigurationError("split must be three non-negative pair counts")
        if 2 * sum(self.split) != self.head_dim:
            raise ConfigurationError(f"2 * sum(split) = {2 * sum(self.split)} != head_dim {self.head_dim}")

    def inv_freqs(self):
        """Per-pair angular frequencies and the axis each pair reads."""
        freqs, axes = [], []
        for axis, d_a in enumerate(self.split):
            freqs.append(self.base ** (-np.arange(d_a) / max(d_a, 1)))
            axes.append(np.full(d_a, axis))
        return np.concatenate(freqs), np.concatenate(axes).astype(int)


def rotate(vector, pos, cfg):
    """Rotate adjacent channel pairs by ``position[axis] * frequency``.

    ``vector`` has trailing dimension ``head_dim``; ``pos`` is a :class:`Position3`
    or an array whose trailing dimension is 3, broadcastable against ``vector``.
    """
    v = np.asarray(vector, dtype=np.float64)
    if v.shape[-1] != cfg.head_dim:
        raise ContractError(f"vector has {v.shape[-1]} channels, config expects {cfg.head_dim}")
    p = np.asarray(pos, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ContractError("positions need three coordinates (m, y, x)")
    freqs, axes = cfg.inv_freqs()
    ang = p[..., axes] * freqs
    cos, sin = np.cos(ang), np.sin(ang)
    a, b = v[..., 0::2], v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, ang.shape[:-1] + (cfg.head_dim,)))
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def positions_for_sequence(text_len, image_hw, reference_hw=None):
    """Positions for text tokens, then noise-latent tokens, then reference-latent tokens."""
    if text_len < 0 or min(image_hw) < 0 or (reference_hw is not None and min(reference_hw) < 0):
        raise ContractError("sizes must be non-negative")
    out = [Position3(MODALITY_TEXT, i, i) for i in range(text_len)]
    H, W = image_hw
    out += [Position3(MODALITY_NOISE, r, c) for r in range(H) for c in range(W)]
    if reference_hw is not None:
        H, W = reference_hw
        out += [Position3(MODALITY_REFERENCE, r, c) for r in range(H) for c in range(W)]
    return out

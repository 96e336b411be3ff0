import numpy as np
import pytest

from flow_align.errors import ConfigurationError, ContractError
from flow_align.posenc import (
    MODALITY_NOISE,
    MODALITY_REFERENCE,
    MODALITY_TEXT,
    Position3,
    RotaryConfig,
    default_split,
    positions_for_sequence,
    rotate,
)


def naive_rotate(v, pos, cfg):
    """Build the block-diagonal rotation matrix explicitly."""
    R = np.zeros((cfg.head_dim, cfg.head_dim))
    k = 0
    for axis, d_a in enumerate(cfg.split):
        for j in range(d_a):
            ang = pos[axis] * cfg.base ** (-j / d_a)
            c, s = np.cos(ang), np.sin(ang)
            R[2 * k:2 * k + 2, 2 * k:2 * k + 2] = [[c, -s], [s, c]]
            k += 1
    return R @ v


def test_default_split_proportions():
    assert default_split(16) == (2, 2, 4)
    assert default_split(64) == (8, 8, 16)
    assert sum(default_split(10)) == 5
    with pytest.raises(ConfigurationError):
        default_split(7)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RotaryConfig(16, split=(2, 2, 2))
    with pytest.raises(ContractError):
        rotate(np.zeros(8), Position3(0, 0, 0), RotaryConfig(16))


def test_zero_position_is_identity(rng):
    v = rng.standard_normal(16)
    assert np.array_equal(rotate(v, Position3(0, 0, 0), RotaryConfig(16)), v)


def test_matches_explicit_matrix(rng):
    cfg = RotaryConfig(24, split=(3, 4, 5), base=500.0)
    for _ in range(20):
        v, pos = rng.standard_normal(24), rng.integers(-50, 50, 3)
        np.testing.assert_allclose(rotate(v, pos, cfg), naive_rotate(v, pos, cfg), atol=1e-12)


def test_norm_and_shift_identity(rng):
    cfg = RotaryConfig(32)
    q, k = rng.standard_normal((1000, 32)), rng.standard_normal((1000, 32))
    p1, p2, d = (rng.integers(-100, 100, (1000, 3)) for _ in range(3))
    np.testing.assert_allclose(np.linalg.norm(rotate(q, p1, cfg), axis=1), np.linalg.norm(q, axis=1), atol=1e-12)
    lhs = np.sum(rotate(q, p1, cfg) * rotate(k, p2, cfg), axis=1)
    rhs = np.sum(rotate(q, p1 + d, cfg) * rotate(k, p2 + d, cfg), axis=1)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_modality_changes_rotation(rng):
    cfg = RotaryConfig(16)
    v = rng.standard_normal(16)
    assert not np.allclose(rotate(v, Position3(MODALITY_TEXT, 3, 4), cfg),
                           rotate(v, Position3(MODALITY_NOISE, 3, 4), cfg))


def test_text_positions_share_coordinates():
    assert positions_for_sequence(3, (0, 0)) == [(MODALITY_TEXT, 0, 0), (MODALITY_TEXT, 1, 1), (MODALITY_TEXT, 2, 2)]


def test_image_grid_and_reference():
    pos = positions_for_sequence(0, (2, 2))
    assert sorted((p.y, p.x) for p in pos) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    pos = positions_for_sequence(2, (2, 3), reference_hw=(1, 2))
    assert len(pos) == 2 + 6 + 2
    assert {p.m for p in pos} == {MODALITY_TEXT, MODALITY_NOISE, MODALITY_REFERENCE}
    with pytest.raises(ContractError):
        positions_for_sequence(-1, (1, 1))

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flow_align.errors import ConfigurationError, ContractError, UndefinedKernelError
from flow_align.mpo import (
    AdvantageNormalizer,
    CurriculumState,
    MpoConfig,
    MpoState,
    TrackerConfig,
    ValueTrackerEntry,
    curriculum_probs,
    curriculum_sample,
    kl_process_noise,
    mpo_loss_and_grad,
    mpo_train_iteration,
    normalize_advantage,
    surprise_weight,
    tracker_update,
)
from flow_align.net import NetworkSpec, OptimizerState, VelocityNet
from flow_align.sde import Trajectory, sde_rollout

from conftest import central_difference


# --- tracker -----------------------------------------------------------------------

def test_kalman_arithmetic():
    e = tracker_update(ValueTrackerEntry(0.0, 1.0), 2.0, 0.0, TrackerConfig(obs_var=1.0))
    assert (e.mu, e.var, e.n) == (1.0, 0.5, 1)


def test_kalman_zero_prior_variance():
    e = tracker_update(ValueTrackerEntry(0.3, 0.0), 5.0, 0.2, TrackerConfig())
    assert e.mu == 0.3 and e.var == 0.2


@pytest.mark.parametrize("mu0,var0,obs", [(0.5, 1.0, 0.25), (-3.0, 4.0, 0.25), (0.0, 1.0, 1.0)])
def test_kalman_constant_signal_closed_form(mu0, var0, obs):
    # with Q = 0 the filter is a precision-weighted mean: the prior's weight is
    # 1 / (1 + n var0 / obs) after n observations
    e, cfg = ValueTrackerEntry(mu0, var0), TrackerConfig(obs_var=obs)
    prev = e.var
    for n in range(1, 2001):
        e = tracker_update(e, 1.0, 0.0, cfg)
        assert e.var <= prev
        prev = e.var
        if n in (1, 100, 2000):
            assert e.mu == pytest.approx(1.0 - (1.0 - mu0) / (1.0 + n * var0 / obs), abs=1e-12)
            assert e.var == pytest.approx(1.0 / (1.0 / var0 + n / obs), rel=1e-12)
    assert abs(e.mu - 1.0) < 1e-3


@pytest.mark.xfail(strict=True, reason="error after n updates is |1 - mu0| / (1 + n var0 / obs_var); "
                                        "from the default prior that is 1.25e-3 at n = 100")
def test_kalman_constant_signal_within_1e3_after_100():
    e, cfg = TrackerConfig().fresh_entry(), TrackerConfig()
    for _ in range(100):
        e = tracker_update(e, 1.0, 0.0, cfg)
    assert abs(e.mu - 1.0) < 1e-3


def test_kalman_rejects_negative_q():
    with pytest.raises(ContractError):
        tracker_update(ValueTrackerEntry(0.0, 1.0), 0.0, -1e-9, TrackerConfig())


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 10), st.floats(-5, 5), st.floats(0, 3), st.floats(0.01, 5))
def test_kalman_sanity(mu, var, r, Q, obs):
    e = tracker_update(ValueTrackerEntry(mu, var), r, Q, TrackerConfig(obs_var=obs))
    K = var / (var + obs)
    assert 0.0 <= K <= 1.0
    assert e.var <= var + Q + 1e-12


def test_tracker_config_validation():
    with pytest.raises(ConfigurationError):
        TrackerConfig(obs_var=0.0)


# --- KL process noise --------------------------------------------------------------

def bias_net():
    spec = NetworkSpec.for_data(data_dim=1, hidden_widths=(), time_embed_dim=0, condition_embed_dim=0)
    return VelocityNet(spec)


def one_step_traj():
    return Trajectory(0, np.array([0.5]), np.zeros((1, 1)), np.zeros((1, 1)), np.array([1.0]), -0.1,
                      np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), False)


def test_process_noise_examples(small_net):
    net = bias_net()
    a, b = np.array([0.0, 0.0]), np.array([0.0, 1.0])
    assert kl_process_noise(net, a, b, one_step_traj(), TrackerConfig(alpha=2.0)) == pytest.approx(0.1, abs=1e-15)
    assert kl_process_noise(net, a, b, one_step_traj(), TrackerConfig(alpha=0.0)) == 0.0
    assert kl_process_noise(net, a, a, one_step_traj(), TrackerConfig()) == 0.0


def test_process_noise_needs_sigma(small_net):
    net, theta = small_net
    traj = sde_rollout(net, theta, 0, 2, 0.0, np.random.default_rng(0))
    with pytest.raises(UndefinedKernelError):
        kl_process_noise(net, theta, theta, traj, TrackerConfig())


# --- advantage normaliser ----------------------------------------------------------

def test_normalizer_examples():
    a, _ = normalize_advantage(AdvantageNormalizer(), 0.0)
    assert a == 0.0
    a, _ = normalize_advantage(AdvantageNormalizer(), 2.0)
    assert a == pytest.approx(2.0, abs=1e-7)


def test_normalizer_uses_pre_update_stats():
    norm = AdvantageNormalizer(mu_A=1.0, var_A=4.0, lam=0.9)
    a, new = normalize_advantage(norm, 3.0)
    assert a == pytest.approx((3.0 - 1.0) / (2.0 + 1e-8), abs=1e-15)
    mu = 0.9 * 1.0 + 0.1 * 3.0
    assert new.mu_A == pytest.approx(mu, abs=1e-15)
    assert new.var_A == pytest.approx(0.9 * 4.0 + 0.1 * (3.0 - mu) ** 2, abs=1e-15)


def test_normalizer_variance_floor():
    norm = AdvantageNormalizer(mu_A=0.0, var_A=1e-30, lam=0.5, eps=1e-6)
    _, new = normalize_advantage(norm, 0.0)
    assert new.var_A == 1e-12


def run_constant_stream(c, n=500, lam=0.99):
    """Drive the normaliser and an inline recurrence side by side; return the last output."""
    mu, var = 0.0, 1.0
    norm = AdvantageNormalizer(lam=lam)
    for _ in range(n):
        expected = (c - mu) / (math.sqrt(var) + 1e-8)
        a, norm = normalize_advantage(norm, c)
        assert a == pytest.approx(expected, rel=1e-12, abs=1e-15)
        mu = lam * mu + (1 - lam) * c
        var = max(lam * var + (1 - lam) * (c - mu) ** 2, 1e-16)
    return a


@pytest.mark.parametrize("c", [0.1, -0.3, 0.5])
def test_normalizer_constant_stream(c):
    assert abs(run_constant_stream(c)) < 0.05


@pytest.mark.xfail(strict=True, reason="A~ decays like c * lam**(n/2); for |c| above about 0.73 it is "
                                        "still above 0.05 after 500 updates")
def test_normalizer_constant_stream_large_advantage():
    assert abs(run_constant_stream(1.0)) < 0.05


def test_normalizer_validation():
    with pytest.raises(ConfigurationError):
        AdvantageNormalizer(lam=1.0)


# --- curriculum --------------------------------------------------------------------

def test_curriculum_examples():
    np.testing.assert_allclose(curriculum_probs(CurriculumState(np.zeros(2), np.zeros(2), 1.0)), [0.5, 0.5])
    np.testing.assert_allclose(curriculum_probs(CurriculumState(np.array([1.0, 0.0]), np.array([99, 99]), 1.0)),
                               [11 / 12, 1 / 12], atol=1e-15)


def test_curriculum_uniform_fallback():
    np.testing.assert_array_equal(curriculum_probs(CurriculumState(np.zeros(3), np.zeros(3), 0.0)), [1 / 3] * 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=1, max_size=6), st.integers(0, 1000), st.floats(0.01, 3))
def test_curriculum_never_starves(sigmas, n, eta):
    sig = np.array(sigmas)
    p = curriculum_probs(CurriculumState(sig, np.full(len(sig), n), eta))
    assert abs(p.sum() - 1.0) < 1e-12
    # analytic floor: every weight is at least eta / sqrt(n + 1)
    floor = (eta / math.sqrt(n + 1)) / np.sum(sig + eta / math.sqrt(n + 1))
    assert p.min() >= floor - 1e-15


def test_curriculum_sample_ids(rng):
    state = CurriculumState(np.array([0.0, 1.0]), np.array([0, 0]), 0.0, conditions=(7, 9))
    assert {curriculum_sample(state, rng) for _ in range(20)} == {9}


# --- surprise weight ----------------------------------------------------------------

def test_surprise_weight_examples():
    e = ValueTrackerEntry(0.4, 0.09)
    assert surprise_weight(0.4, e, 0.5) == 1.0
    assert surprise_weight(0.7, e, 0.5, eps=0.0) == pytest.approx(1.5, abs=1e-12)
    assert surprise_weight(3.0, e, 0.0) == 1.0


# --- loss ----------------------------------------------------------------------------

def test_target_identity(small_net):
    net, theta = small_net
    t = np.array([0.5, 0.25])
    x_next = np.array([[1.0, 1.0], [0.0, 0.0]])
    traj = Trajectory(0, t, np.array([[1.0, 1.0], [1.0, 1.0]]), np.zeros((2, 2)), np.full(2, 0.1), -0.25,
                      np.zeros((2, 2)), x_next, np.zeros(2), False)
    # with z0 = (0, 0): u = z_t / t, so (2, 2) and (4, 4); a zero net makes the loss mean ||u||^2
    loss, _ = mpo_loss_and_grad(net, np.zeros(theta.size), traj, 0, 1.0)
    assert loss == pytest.approx((8.0 + 32.0) / 2, abs=1e-12)


def test_zero_weight(small_net, rng):
    net, theta = small_net
    traj = sde_rollout(net, theta, 0, 4, 0.1, rng)
    loss, grad = mpo_loss_and_grad(net, theta, traj, 0, 0.0)
    assert loss == 0.0 and np.all(grad == 0.0)


def test_below_t_min_rejected(small_net):
    net, theta = small_net
    traj = Trajectory(0, np.array([1e-4]), np.zeros((1, 2)), np.zeros((1, 2)), np.array([0.1]), -0.1,
                      np.zeros((1, 2)), np.ones((1, 2)), np.zeros(1), False)
    with pytest.raises(ContractError):
        mpo_loss_and_grad(net, theta, traj, 0, 1.0)


def test_loss_gradient_finite_differences(small_net, rng):
    net, theta = small_net
    traj = sde_rollout(net, theta, 1, 5, 0.2, rng, score_correction=False)
    f = lambda th: mpo_loss_and_grad(net, th, traj, 1, -1.7)
    _, grad = f(theta)
    for _ in range(5):
        d = rng.standard_normal(theta.size)
        fd = central_difference(lambda th: f(th)[0], theta, d)
        assert abs(fd - grad @ d) < 1e-5 * max(abs(fd), 1e-8)


def test_positive_weight_step_reduces_residual(small_net, rng):
    net, theta = small_net
    traj = sde_rollout(net, theta, 2, 6, 0.2, rng)
    l0, g = mpo_loss_and_grad(net, theta, traj, 2, 1.3)
    for lr in (1e-1, 1e-2, 1e-3, 1e-4):
        l1, _ = mpo_loss_and_grad(net, theta - lr * g, traj, 2, 1.3)
        if l1 < l0:
            break
    assert l1 < l0


# --- training iteration ------------------------------------------------------------

def test_one_trajectory_one_step_per_iteration(small_net):
    net, theta = small_net
    cfg = MpoConfig(total_iterations=20, steps=4)
    state = MpoState.create(cfg, [0, 1, 2])
    opt = OptimizerState.create(theta.size, lr=1e-3)
    for it in range(20):
        theta, opt, m = mpo_train_iteration(net, theta, opt, cfg, state, [0, 1, 2], lambda x, c: float(x[0] > 0), it)
        assert state.trajectories == it + 1 and state.optimizer_steps == it + 1 and opt.step_count == it + 1
        assert abs(m["norm_A"]) <= cfg.adv_clip and m["Q"] >= 0.0
    assert sum(e.n for e in state.tracker.values()) == 20


def test_baseline_is_pre_update_mean(small_net):
    net, theta = small_net
    cfg = MpoConfig(steps=3)
    state = MpoState.create(cfg, [0])
    opt = OptimizerState.create(theta.size, lr=1e-3)
    _, _, m = mpo_train_iteration(net, theta, opt, cfg, state, [0], lambda x, c: 0.9, 0)
    assert m["raw_A"] == pytest.approx(0.9 - cfg.tracker.init_mu, abs=1e-15)


def test_sigma_zero_refused(small_net):
    net, theta = small_net
    cfg = MpoConfig(sigma_start=0.0, sigma_floor=0.0)
    with pytest.raises(UndefinedKernelError):
        mpo_train_iteration(net, theta, OptimizerState.create(theta.size), cfg, MpoState.create(cfg, [0]), [0],
                            lambda x, c: 0.0, 0)


def test_frozen_policy_tracker_matches_mean(small_net):
    net, theta = small_net
    cfg = MpoConfig(steps=3)
    state = MpoState.create(cfg, [0])
    opt = OptimizerState.create(theta.size, lr=0.0)
    noise = np.random.default_rng(5)
    rewards = []

    def reward(x, c):
        r = float(np.clip(0.6 + 0.2 * noise.standard_normal(), 0, 1))
        rewards.append(r)
        return r

    for it in range(500):
        theta, opt, m = mpo_train_iteration(net, theta, opt, cfg, state, [0], reward, it)
        assert m["Q"] == 0.0
    assert abs(state.tracker[0].mu - np.mean(rewards)) <= 0.05


def test_constant_reward_raw_advantage_vanishes(small_net):
    net, theta = small_net
    cfg = MpoConfig(steps=3, total_iterations=600)
    state = MpoState.create(cfg, [0])
    opt = OptimizerState.create(theta.size, lr=5e-6)
    for it in range(600):
        theta, opt, m = mpo_train_iteration(net, theta, opt, cfg, state, [0], lambda x, c: 0.7, it)
    assert abs(m["raw_A"]) < 1e-3 and m["w_c"] == pytest.approx(1.0, abs=1e-2)


@pytest.mark.xfail(strict=True, reason="Adam rescales the vanishing weighted gradient to a step of order lr, "
                                        "and the EMA-normalised advantage stays O(1) as its variance shrinks")
def test_constant_reward_parameter_drift_vanishes(small_net):
    net, theta = small_net
    cfg = MpoConfig(steps=3, total_iterations=600)
    state = MpoState.create(cfg, [0])
    opt = OptimizerState.create(theta.size, lr=5e-6, weight_decay=0.0)
    for it in range(600):
        new, opt, _ = mpo_train_iteration(net, theta, opt, cfg, state, [0], lambda x, c: 0.7, it)
        drift, theta = np.linalg.norm(new - theta), new
    assert drift < 1e-6


def test_tracker_table(small_net):
    state = MpoState.create(MpoConfig(), [1, 0])
    assert list(state.tracker_table()) == ["0", "1"]
    assert state.tracker_table()["0"] == {"mu": 0.5, "var": 1.0, "n": 0}

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from flow_align.errors import ConfigurationError, ContractError, UndefinedKernelError
from flow_align.grpo import (
    Group,
    GrpoConfig,
    annealed_sigma,
    collect_groups,
    group_advantages,
    grpo_loss_and_grad,
    grpo_train_iteration,
    make_group,
)
from flow_align.net import NetworkSpec, OptimizerState, VelocityNet
from flow_align.sde import sde_rollout, sde_rollout_batch

from conftest import central_difference

rewards_lists = st.lists(st.floats(-10, 10, allow_nan=False), min_size=2, max_size=12)


def test_advantage_examples():
    np.testing.assert_allclose(group_advantages([1, 2, 3]), [-1.224745, 0, 1.224745], atol=1e-6)
    np.testing.assert_allclose(group_advantages([1, 2, 3]), [-math.sqrt(1.5), 0, math.sqrt(1.5)], atol=1e-12)
    assert np.array_equal(group_advantages([5, 5, 5]), [0, 0, 0])
    np.testing.assert_array_equal(group_advantages([0, 1]), [-1, 1])
    with pytest.raises(ContractError):
        group_advantages([1.0])


@settings(max_examples=200, deadline=None)
@given(rewards_lists)
def test_advantages_standardised(r):
    r = np.array(r)
    assume(r.std() > 1e-6)
    a = group_advantages(r)
    assert abs(a.sum()) < 1e-9
    assert abs(np.mean(a ** 2) - 1.0) < 1e-9


@settings(max_examples=200, deadline=None)
@given(rewards_lists, st.floats(-5, 5), st.floats(0.1, 10))
def test_advantages_shift_scale_invariant(r, shift, scale):
    r = np.array(r)
    assume(r.std() > 1e-3)
    np.testing.assert_allclose(group_advantages(scale * r + shift), group_advantages(r), atol=1e-7)


def test_annealed_sigma():
    assert annealed_sigma(0, 300, 0.1, 1e-4) == 0.1
    assert annealed_sigma(150, 300, 0.1, 1e-4) == pytest.approx(0.05)
    assert annealed_sigma(300, 300, 0.1, 1e-4) == 1e-4
    assert annealed_sigma(10_000, 300, 0.1, 1e-4) == 1e-4


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GrpoConfig(group_size=1)
    with pytest.raises(ConfigurationError):
        GrpoConfig(clip_eps=0.0)


def groups_for(net, theta, rng, G=4, steps=3, sigma=0.2):
    out = []
    for c in (0, 1):
        rngs = [np.random.default_rng(rng.integers(1 << 31)) for _ in range(G)]
        trajs = sde_rollout_batch(net, theta, np.full(G, c), steps, sigma, rngs)
        out.append(make_group(c, trajs, rng.uniform(0, 1, G)))
    return out


def test_objective_zero_at_snapshot(small_net, rng):
    net, theta = small_net
    stats = {}
    obj, _ = grpo_loss_and_grad(net, theta, groups_for(net, theta, rng), GrpoConfig(), stats)
    assert abs(obj) < 1e-12
    assert stats["mean_ratio"] == pytest.approx(1.0, abs=1e-10) and stats["clip_fraction"] == 0.0


def test_clipping_arithmetic(small_net):
    net, theta = small_net
    traj = sde_rollout(net, theta, 0, 1, 0.3, np.random.default_rng(0))
    # pretend the sampler assigned 1/1.5 of the current density: ratio = 1.5
    old = replace(traj, logprob=traj.logprob - math.log(1.5))
    group = Group(0, (old,), np.array([1.0]), np.array([1.0]))
    obj, _ = grpo_loss_and_grad(net, theta, [group], GrpoConfig(clip_eps=0.2))
    assert obj == pytest.approx(1.2, abs=1e-10)
    group_neg = Group(0, (old,), np.array([0.0]), np.array([-1.0]))
    obj, grad = grpo_loss_and_grad(net, theta, [group_neg], GrpoConfig(clip_eps=0.2))
    assert obj == pytest.approx(-1.5, abs=1e-10) and np.any(grad != 0)


def test_clipped_branch_has_zero_gradient(small_net):
    net, theta = small_net
    traj = sde_rollout(net, theta, 0, 1, 0.3, np.random.default_rng(0))
    old = replace(traj, logprob=traj.logprob - math.log(1.5))
    _, grad = grpo_loss_and_grad(net, theta, [Group(0, (old,), np.array([1.0]), np.array([1.0]))], GrpoConfig())
    assert np.all(grad == 0.0)


def test_gradient_toy_one_step():
    spec = NetworkSpec.for_data(data_dim=1, hidden_widths=(3,), time_embed_dim=2, condition_embed_dim=1)
    net = VelocityNet(spec)
    theta_old = net.init_params(3)
    theta = theta_old + 1e-3 * np.random.default_rng(1).standard_normal(theta_old.size)
    trajs = sde_rollout_batch(net, theta_old, np.zeros(2, dtype=int), 1, 0.5,
                              [np.random.default_rng(i) for i in range(2)])
    groups = [make_group(0, trajs, [0.0, 1.0])]
    f = lambda th: grpo_loss_and_grad(net, th, groups, GrpoConfig())
    _, grad = f(theta)
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = 1.0
        fd = central_difference(lambda th: f(th)[0], theta, e)
        assert abs(fd - grad[j]) <= 1e-5 * max(abs(fd), abs(grad[j]), 1e-9)


def test_sigma_zero_rejected(small_net, rng):
    net, theta = small_net
    traj = sde_rollout(net, theta, 0, 2, 0.0, rng)
    with pytest.raises(UndefinedKernelError):
        grpo_loss_and_grad(net, theta, [make_group(0, [traj, traj], [0.0, 1.0])], GrpoConfig())


def test_collect_groups_reproducible(small_net):
    net, theta = small_net
    cfg = GrpoConfig(group_size=3, steps=4)
    reward = lambda x, c: x[:, 0]
    a = collect_groups(net, theta, cfg, [0, 1], reward, 5, 7, 0.1)
    b = collect_groups(net, theta, cfg, [0, 1], reward, 5, 7, 0.1)
    for ga, gb in zip(a, b):
        assert np.array_equal(ga.rewards, gb.rewards)
    c = collect_groups(net, theta, cfg, [0, 1], reward, 6, 7, 0.1)
    assert not np.array_equal(a[0].rewards, c[0].rewards)


def test_iteration_first_pass_ratio_one(small_net):
    net, theta = small_net
    cfg = GrpoConfig(group_size=4, steps=3)
    opt = OptimizerState.create(theta.size, lr=1e-3)
    _, opt2, m, groups = grpo_train_iteration(net, theta, opt, cfg, [0, 2], lambda x, c: x[:, 0], 0)
    assert m["mean_ratio"] == pytest.approx(1.0, abs=1e-10) and m["clip_fraction"] == 0.0
    assert opt2.step_count == 1 and len(groups) == 2 and all(len(g.trajectories) == 4 for g in groups)


def test_constant_reward_leaves_theta(small_net):
    net, theta = small_net
    cfg = GrpoConfig(group_size=4, steps=3, inner_epochs=2)
    const = lambda x, c: np.full(len(x), 0.7)
    opt = OptimizerState.create(theta.size, lr=1e-2, weight_decay=0.0)
    new, *_ = grpo_train_iteration(net, theta, opt, cfg, [0, 1], const, 0)
    assert np.array_equal(new, theta)
    # decoupled weight decay still shrinks the parameters when switched on
    opt = OptimizerState.create(theta.size, lr=1e-2, weight_decay=0.01)
    new, *_ = grpo_train_iteration(net, theta, opt, replace(cfg, inner_epochs=1), [0, 1], const, 0)
    np.testing.assert_array_equal(new, theta * (1 - 1e-2 * 0.01))

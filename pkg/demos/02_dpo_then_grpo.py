"""
Preference tuning: DPO, then GRPO
=================================

Start from a pretrained two-mode model and push it towards the right-hand
mode, first offline from scored pairs and then on-policy with group-relative
advantages. Takes under a minute.
"""

import numpy as np

from flow_align import runner
from flow_align.config import OptimConfig
from flow_align.dpo import DpoConfig, build_pairs
from flow_align.flow import TimestepSampler, ode_sample
from flow_align.grpo import GrpoConfig
from flow_align.net import NetworkSpec, VelocityNet
from flow_align.rewards import EnsembleSpec, RewardSpec, ensemble_reward
from flow_align.worldgen import two_gaussians

conditions = two_gaussians(2)
net = VelocityNet(NetworkSpec.for_data(2, (64, 64), 8, 2, 4))
theta, _ = runner.train_flow_matching(net, net.init_params(0), conditions, 8000, 128,
                                      TimestepSampler("logit_normal"), OptimConfig(lr=1e-3),
                                      np.random.default_rng(0))

# a soft half-plane reward: close to 1 right of the y axis, close to 0 left of it
rewards = [EnsembleSpec.single(RewardSpec.region([1.0, 0.0], 0.0, 0.5))] * 2
reward_fn = lambda x, c: ensemble_reward(x, c, rewards)


def mean_reward(th):
    c = np.arange(2000) % 2
    x, _ = ode_sample(net, th, c, 12, np.random.default_rng(7))
    return reward_fn(x, c).mean()


print("pretrained mean reward: %.3f" % mean_reward(theta))

# DPO: six candidates per prompt, scored 1-5 with a noisy labeller,
# paired best-vs-worst within each prompt
rng = np.random.default_rng(1)
cands = runner.generate_candidates(net, theta, 2, 1024, 6, 12, rewards, 0.1, rng)
pairs = build_pairs(cands)
print("preference pairs:", len(pairs))
dcfg = DpoConfig(theta, beta_eff=1.0)
theta_dpo, _ = runner.train_dpo(net, theta, pairs, 1000, 64, dcfg, OptimConfig(lr=3e-4), rng)
print("after DPO:        %.3f" % mean_reward(theta_dpo))

# GRPO: 8 groups of 8 SDE rollouts per iteration, noise annealed from 0.1
gcfg = GrpoConfig(group_size=8, total_iterations=100, groups_per_iteration=8)
history = []
theta_rl, _ = runner.train_grpo(net, theta_dpo, gcfg, OptimConfig(lr=1e-3), 2, reward_fn, 100, 8,
                                on_metrics=lambda m: history.append(m["mean_reward"]))
print("rollout reward every 20 iterations:", np.round(history[::20], 3))
print("after GRPO:       %.3f" % mean_reward(theta_rl))

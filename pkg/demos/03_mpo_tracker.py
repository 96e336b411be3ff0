"""
Single-trajectory updates with a reward belief
==============================================

MPO keeps a Gaussian belief about each condition's reward and uses it as the
baseline, so every update needs one rollout. Watch the belief, the curriculum
and the normalised advantage while training.
"""

import numpy as np

from flow_align import runner
from flow_align.config import OptimConfig
from flow_align.flow import TimestepSampler, ode_sample
from flow_align.mpo import CurriculumState, MpoConfig, MpoState, curriculum_probs, mpo_train_iteration
from flow_align.net import NetworkSpec, VelocityNet
from flow_align.rewards import RewardSpec
from flow_align.worldgen import two_gaussians

conditions = two_gaussians(2)
net = VelocityNet(NetworkSpec.for_data(2, (64, 64), 8, 2, 4))
theta, _ = runner.train_flow_matching(net, net.init_params(0), conditions, 8000, 128,
                                      TimestepSampler("logit_normal"), OptimConfig(lr=1e-3),
                                      np.random.default_rng(0))
region = RewardSpec.region([1.0, 0.0], 0.0, 0.5)

cfg = MpoConfig(total_iterations=3000)
state = MpoState.create(cfg, [0, 1])
opt = runner.make_optimizer(theta.size, OptimConfig(lr=1e-3))
for it in range(3000):
    theta, opt, m = mpo_train_iteration(net, theta, opt, cfg, state, [0, 1],
                                        lambda x, c: float(region(x[None])[0]), it, seed=0)
    if it % 500 == 0:
        cur = CurriculumState.from_tracker(state.tracker, [0, 1], cfg.eta)
        print("it %4d  c=%d  r=%.2f  A~=%+.2f  w=%.2f  mu=%.3f  var=%.4f  p(c)=%s"
              % (it, m["condition"], m["reward"], m["norm_A"], m["w_c"], m["mu_c"], m["var_c"],
                 np.round(curriculum_probs(cur), 3)))

# one rollout and one optimizer step per iteration
print("trajectories:", state.trajectories, " updates:", state.optimizer_steps)
# near the end of the anneal the SDE noise is tiny, so the per-step KL between
# consecutive policies (and with it the process noise) gets very large: the
# belief variances inflate even though the means have settled
print("tracker:", state.tracker_table())

x, _ = ode_sample(net, theta, np.arange(2000) % 2, 12, np.random.default_rng(3))
print("final mean reward: %.3f" % region(x).mean())

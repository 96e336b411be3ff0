"""Training loops, evaluation and stage orchestration with on-disk artifacts."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field, replace

import numpy as np

from . import gradcheck as gc
from .config import ExperimentConfig
from .dpo import DpoConfig, ScoredCandidate, build_pairs, dpo_loss_and_grad, save_pairs
from .errors import ConfigurationError, DependencyError, DivergenceError
from .flow import TimestepSampler, fm_loss_and_grad, ode_sample
from .grpo import GrpoConfig, grpo_train_iteration
from .mpo import MpoConfig, MpoState, TrackerConfig, mpo_train_iteration
from .net import (
    NetworkSpec,
    OptimizerState,
    VelocityNet,
    adamw_step,
    atomic_write_text,
    average_params,
    global_norm,
    load_checkpoint,
    save_checkpoint,
)
from .prompttok import segment_prompt
from .rewards import RewardSpec, ensemble_reward, score_candidates
from .sde import dump_trajectory
from .worldgen import sample_data


OUT_ENV = "FLOW_ALIGN_OUT"
UPSTREAM = {
    "sft": ("pretrain",),
    "dpo": ("sft", "pretrain"),
    "grpo": ("dpo", "sft", "pretrain"),
    "mpo": ("dpo", "sft", "pretrain"),
    "eval": ("mpo", "grpo", "dpo", "sft", "pretrain"),
}


# --- small helpers ---------------------------------------------------------------

def make_optimizer(n_params, oc):
    return OptimizerState.create(n_params, lr=oc.lr, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps,
                                 weight_decay=oc.weight_decay, clip_norm=oc.clip_norm)


def scheduled_lr(oc, step, total):
    """Learning rate at 0-based ``step``: optional linear warm-up, then constant or cosine."""
    warm = min(1.0, (step + 1) / oc.warmup_steps) if oc.warmup_steps > 0 else 1.0
    if oc.schedule == "cosine":
        return oc.lr * warm * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))
    return oc.lr * warm


def reward_fn_for(task_rewards):
    """``f(x, c)`` scoring points under the per-condition ensembles."""
    return lambda x, c: ensemble_reward(x, c, task_rewards)


class MetricsWriter:
    """Append-only CSV with a fixed header; rows are buffered and flushed atomically."""

    def __init__(self, path, columns):
        self.path, self.columns, self.rows = path, list(columns), []

    def append(self, row):
        self.rows.append([row.get(c, "") for c in self.columns])

    def flush(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in self.rows])
        atomic_write_text(self.path, buf.getvalue())


# --- training loops ----------------------------------------------------------------

def _mark_last_good(exc, theta):
    # theta is only reassigned after a successful step, so it is still the last good one
    exc.last_good = theta
    return exc


def train_flow_matching(net, theta, conditions, steps, batch_size, sampler, oc, rng,
                        data_fn=None, log_every=100, on_metrics=None):
    """Plain flow-matching regression. ``data_fn(c, n, rng)`` overrides target sampling."""
    opt = make_optimizer(theta.size, oc)
    data_fn = data_fn or (lambda c, n, r: sample_data(conditions[c], n, r))
    K = len(conditions)
    for k in range(steps):
        c = rng.integers(0, K, batch_size)
        x0 = np.empty((batch_size, net.spec.data_dim))
        for cid in range(K):
            rows = c == cid
            if rows.any():
                x0[rows] = data_fn(cid, int(rows.sum()), rng)
        try:
            loss, grad = fm_loss_and_grad(net, theta, x0, c, sampler, rng)
            if not math.isfinite(loss):
                raise DivergenceError("flow-matching loss is not finite", step=k)
            opt = replace(opt, lr=scheduled_lr(oc, k, steps))
            theta, opt = adamw_step(opt, theta, grad)
        except DivergenceError as exc:
            raise _mark_last_good(exc, theta)
        if on_metrics and (k % log_every == 0 or k == steps - 1):
            on_metrics({"iteration": k, "loss": loss, "grad_norm": global_norm(grad), "lr": opt.lr})
    return theta, opt


def generate_candidates(net, theta, conditions_count, prompts, per_prompt, ode_steps, rewards,
                        score_noise, rng):
    """Sample ``per_prompt`` ODE candidates for each prompt and score them 1-5."""
    cond = np.repeat(np.arange(prompts) % conditions_count, per_prompt)
    x, _ = ode_sample(net, theta, cond, ode_steps, rng)
    r = ensemble_reward(x, cond, rewards)
    scores = score_candidates(r, rng, score_noise)
    return [ScoredCandidate(int(cond[i]), x[i], int(scores[i]), prompt=i // per_prompt)
            for i in range(len(x))]


def train_dpo(net, theta, pairs, steps, batch_size, dcfg, oc, rng, log_every=50, on_metrics=None):
    if not pairs:
        raise ConfigurationError("no preference pairs; every candidate scored 3 or all in one class")
    opt = make_optimizer(theta.size, oc)
    for k in range(steps):
        idx = rng.choice(len(pairs), min(batch_size, len(pairs)), replace=False)
        stats = {}
        try:
            loss, grad = dpo_loss_and_grad(net, theta, dcfg, [pairs[i] for i in idx], rng, stats=stats)
            opt = replace(opt, lr=scheduled_lr(oc, k, steps))
            theta, opt = adamw_step(opt, theta, grad)
        except DivergenceError as exc:
            raise _mark_last_good(exc, theta)
        if on_metrics and (k % log_every == 0 or k == steps - 1):
            on_metrics({"iteration": k, "loss": loss, "grad_norm": global_norm(grad), "lr": opt.lr, **stats})
    return theta, opt


def grpo_group_conditions(iteration, groups, n_conditions):
    """Round-robin condition ids for the groups of one iteration."""
    return [(iteration * groups + g) % n_conditions for g in range(groups)]


def train_grpo(net, theta, gcfg, oc, n_conditions, reward_fn, iterations, groups_per_iteration,
               seed=0, on_metrics=None, on_groups=None):
    opt = make_optimizer(theta.size, oc)
    for it in range(iterations):
        opt = replace(opt, lr=scheduled_lr(oc, it, iterations))
        conds = grpo_group_conditions(it, groups_per_iteration, n_conditions)
        try:
            theta, opt, metrics, groups = grpo_train_iteration(net, theta, opt, gcfg, conds, reward_fn, it, seed)
        except DivergenceError as exc:
            raise _mark_last_good(exc, theta)
        if on_metrics:
            on_metrics(metrics)
        if on_groups:
            on_groups(groups)
    return theta, opt


def train_mpo(net, theta, mcfg, oc, conditions, reward_fn, iterations, seed=0, state=None,
              on_metrics=None):
    """Run ``iterations`` single-trajectory updates; returns ``(theta, opt, state)``."""
    opt = make_optimizer(theta.size, oc)
    state = state or MpoState.create(mcfg, conditions)
    scalar_reward = lambda x, c: float(reward_fn(x[None], np.array([c]))[0])
    for it in range(iterations):
        opt = replace(opt, lr=scheduled_lr(oc, it, iterations))
        try:
            theta, opt, metrics = mpo_train_iteration(net, theta, opt, mcfg, state, conditions,
                                                      scalar_reward, it, seed)
        except DivergenceError as exc:
            raise _mark_last_good(exc, theta)
        if on_metrics:
            on_metrics(metrics)
    return theta, opt, state


# --- evaluation -----------------------------------------------------------------------

def mode_coverage(x, cond_spec, radius=3.0):
    """Fraction of points within ``radius`` Mahalanobis units of each mixture mode."""
    if cond_spec.kind != "gmm":
        return np.array([])
    x = np.atleast_2d(x)
    out = []
    for m, C in zip(cond_spec.mode_means, cond_spec.mode_covs):
        diff = x - m
        md2 = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(C), diff)
        out.append(np.mean(md2 <= radius ** 2))
    return np.array(out)


def realism_spec_for(cond_spec):
    return RewardSpec.realism(cond_spec.mode_means, cond_spec.mode_covs, cond_spec.weights)


def evaluate_samples(samples, conditions, rewards):
    """Metrics for given samples; ``samples[c]`` holds the points for condition ``c``."""
    per = []
    for c, cs in enumerate(conditions):
        x = samples[c]
        cov = mode_coverage(x, cs)
        entry = {
            "condition": c,
            "coverage": cov.tolist(),
            "in_any_mode": float(np.sum(cov)) if cov.size else float("nan"),
            "mean_reward": float(np.mean(ensemble_reward(x, c, rewards))),
        }
        if cs.kind == "gmm":
            entry["mean_realism"] = float(np.mean(realism_spec_for(cs)(x)))
        per.append(entry)
    mean = lambda key: float(np.mean([p[key] for p in per if key in p]))
    return {"per_condition": per, "mean_reward": mean("mean_reward"),
            "mean_realism": mean("mean_realism"), "in_any_mode": mean("in_any_mode")}


def evaluate(net, theta, conditions, rewards, n_samples, rng, ode_steps=12):
    """ODE-sample ``n_samples`` points per condition and score them."""
    samples = [ode_sample(net, theta, np.full(n_samples, c), ode_steps, rng)[0]
               for c in range(len(conditions))]
    return evaluate_samples(samples, conditions, rewards)


# --- stage orchestration -----------------------------------------------------------

@dataclass
class StageResult:
    stage: str
    exit_status: int
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def output_root(cfg):
    return cfg.out_dir or os.environ.get(OUT_ENV) or "runs"


def network_spec_for(cfg):
    n = cfg.network
    return NetworkSpec.for_data(data_dim=2, hidden_widths=n.hidden_widths, time_embed_dim=n.time_embed_dim,
                                condition_count=len(cfg.task.conditions),
                                condition_embed_dim=n.condition_embed_dim)


def resolve_init(cfg, stage):
    if cfg.init_checkpoint:
        if not os.path.exists(cfg.init_checkpoint):
            raise DependencyError(f"init checkpoint {cfg.init_checkpoint} not found")
        return cfg.init_checkpoint
    root = output_root(cfg)
    for up in UPSTREAM.get(stage, ()):
        path = os.path.join(root, up, "checkpoint.json")
        if os.path.exists(path):
            return path
    raise DependencyError(f"stage {stage!r} needs a checkpoint from one of {UPSTREAM.get(stage)} "
                          f"under {root!r} or an explicit init_checkpoint")


def _stage_dir(cfg, stage):
    d = os.path.join(output_root(cfg), stage)
    os.makedirs(d, exist_ok=True)
    return d


def run_stage(cfg: ExperimentConfig):
    """Run ``cfg.stage`` and write its artifacts. Returns a :class:`StageResult`."""
    runner = {
        "pretrain": _run_pretrain, "sft": _run_sft, "dpo": _run_dpo, "grpo": _run_grpo,
        "mpo": _run_mpo, "eval": _run_eval, "gradcheck": _run_gradcheck, "tokenize": _run_tokenize,
    }[cfg.stage]
    return runner(cfg)


@contextmanager
def _keep_last_good(stage_dir, spec):
    """On divergence, persist the parameters from before the failing step, then re-raise."""
    try:
        yield
    except DivergenceError as exc:
        theta = getattr(exc, "last_good", None)
        if theta is not None:
            save_checkpoint(os.path.join(stage_dir, "checkpoint.last_good.json"), spec, theta,
                            exc.step or 0)
        raise


def _run_pretrain(cfg):
    pc, out = cfg.pretrain, _stage_dir(cfg, "pretrain")
    spec = network_spec_for(cfg)
    net = VelocityNet(spec)
    theta = net.init_params(cfg.network.init_seed)
    sampler = TimestepSampler(pc.sampler, pc.logit_mean, pc.logit_std, pc.t_min)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"), ["stage", "iteration", "loss", "grad_norm", "lr"])
    rng = np.random.default_rng(cfg.seed)
    with _keep_last_good(out, spec):
        theta, opt = train_flow_matching(net, theta, cfg.task.condition_specs(), pc.steps, pc.batch_size,
                                         sampler, pc.optim, rng, log_every=pc.log_every,
                                         on_metrics=lambda m: metrics.append({"stage": "pretrain", **m}))
    metrics.flush()
    ckpt = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt, spec, theta, opt.step_count)
    return StageResult("pretrain", 0, {"checkpoint": ckpt, "metrics": metrics.path})


def _run_sft(cfg):
    sc, out = cfg.sft, _stage_dir(cfg, "sft")
    spec, theta0, step0 = load_checkpoint(resolve_init(cfg, "sft"))
    net = VelocityNet(spec)
    conds, rewards = cfg.task.condition_specs(), cfg.task.reward_specs()
    rng = np.random.default_rng(cfg.seed)
    # curated pool: target samples whose reward clears the threshold
    pools = []
    for c, cs in enumerate(conds):
        x = sample_data(cs, sc.pool_size, rng)
        keep = x[ensemble_reward(x, c, rewards) >= sc.reward_threshold]
        if len(keep) == 0:
            raise ConfigurationError(f"no samples of condition {c} pass reward >= {sc.reward_threshold}")
        pools.append(keep)
    data_fn = lambda c, n, r: pools[c][r.integers(0, len(pools[c]), n)]
    sampler = TimestepSampler("uniform", t_min=sc.t_min)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["stage", "specialist", "iteration", "loss", "grad_norm", "lr"])
    specialists = []
    for s in range(sc.specialists):
        srng = np.random.default_rng([cfg.seed, s])
        with _keep_last_good(out, spec):
            th, _ = train_flow_matching(net, theta0.copy(), conds, sc.steps, sc.batch_size, sampler, sc.optim,
                                        srng, data_fn=data_fn, log_every=sc.log_every,
                                        on_metrics=lambda m, s=s: metrics.append(
                                            {"stage": "sft", "specialist": s, **m}))
        specialists.append(th)
    theta = average_params(specialists)
    metrics.flush()
    ckpt = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt, spec, theta, step0 + sc.steps)
    return StageResult("sft", 0, {"checkpoint": ckpt, "metrics": metrics.path})


def _run_dpo(cfg):
    dc, out = cfg.dpo, _stage_dir(cfg, "dpo")
    spec, theta, step0 = load_checkpoint(resolve_init(cfg, "dpo"))
    net = VelocityNet(spec)
    rewards = cfg.task.reward_specs()
    rng = np.random.default_rng(cfg.seed)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["stage", "round", "iteration", "loss", "grad_norm", "lr", "skipped",
                             "mean_logit", "accuracy"])
    for rnd in range(dc.rounds):
        # each round re-snapshots the policy as both candidate generator and reference
        cands = generate_candidates(net, theta, spec.condition_count, dc.prompts, dc.candidates_per_prompt,
                                    dc.ode_steps, rewards, dc.score_noise, rng)
        pairs = build_pairs(cands)
        pairs_path = os.path.join(out, "pairs.jsonl" if dc.rounds == 1 else f"pairs.round{rnd}.jsonl")
        save_pairs(pairs, pairs_path)
        dcfg = DpoConfig(theta.copy(), beta_eff=dc.beta_eff,
                         t_sampler=TimestepSampler("uniform", t_min=dc.t_min), skip_factor=dc.skip_factor)
        with _keep_last_good(out, spec):
            theta, _ = train_dpo(net, theta, pairs, dc.steps, dc.batch_size, dcfg, dc.optim, rng, dc.log_every,
                                 on_metrics=lambda m, r=rnd: metrics.append({"stage": "dpo", "round": r, **m}))
    metrics.flush()
    ckpt = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt, spec, theta, step0 + dc.rounds * dc.steps)
    return StageResult("dpo", 0, {"checkpoint": ckpt, "metrics": metrics.path, "pairs": pairs_path})


def _run_grpo(cfg):
    gc_, out = cfg.grpo, _stage_dir(cfg, "grpo")
    spec, theta, step0 = load_checkpoint(resolve_init(cfg, "grpo"))
    net = VelocityNet(spec)
    gcfg = GrpoConfig(group_size=gc_.group_size, clip_eps=gc_.clip_eps, inner_epochs=gc_.inner_epochs,
                      steps=gc_.steps, sigma_start=gc_.sigma_start, sigma_floor=gc_.sigma_floor,
                      total_iterations=gc_.iterations)
    groups = max(1, gc_.batch_size // gc_.group_size)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["stage", "iteration", "mean_reward", "std_reward", "mean_ratio", "clip_fraction", "grad_norm"])
    dump_path = os.path.join(out, "trajectories.jsonl")
    dump_cm = open(dump_path, "w", encoding="utf-8") if cfg.dump_trajectories else nullcontext()
    with _keep_last_good(out, spec), dump_cm as dump:
        on_groups = (lambda gs: [dump_trajectory(t, dump) for g in gs for t in g.trajectories]) if dump else None
        theta, opt = train_grpo(net, theta, gcfg, gc_.optim, spec.condition_count,
                                reward_fn_for(cfg.task.reward_specs()), gc_.iterations, groups, cfg.seed,
                                on_metrics=lambda m: metrics.append({"stage": "grpo", **m}), on_groups=on_groups)
    metrics.flush()
    ckpt = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt, spec, theta, step0 + opt.step_count)
    artifacts = {"checkpoint": ckpt, "metrics": metrics.path}
    if cfg.dump_trajectories:
        artifacts["trajectories"] = dump_path
    return StageResult("grpo", 0, artifacts)


def _run_mpo(cfg):
    mc, out = cfg.mpo, _stage_dir(cfg, "mpo")
    spec, theta, step0 = load_checkpoint(resolve_init(cfg, "mpo"))
    net = VelocityNet(spec)
    mcfg = MpoConfig(gamma=mc.gamma, adv_clip=mc.adv_clip, steps=mc.steps, sigma_start=mc.sigma_start,
                     sigma_floor=mc.sigma_floor, total_iterations=mc.iterations, eta=mc.eta, lam=mc.lam,
                     score_correction=mc.score_correction,
                     tracker=TrackerConfig(obs_var=mc.obs_var, alpha=mc.alpha, init_mu=mc.init_mu,
                                           init_var=mc.init_var))
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["stage", "iteration", "condition", "reward", "raw_A", "norm_A", "w_c", "Q", "mu_c", "var_c",
                             "grad_norm", "g_t"])
    with _keep_last_good(out, spec):
        theta, opt, state = train_mpo(net, theta, mcfg, mc.optim, list(range(spec.condition_count)),
                                      reward_fn_for(cfg.task.reward_specs()), mc.iterations, cfg.seed,
                                      on_metrics=lambda m: metrics.append({"stage": "mpo", **m}))
    metrics.flush()
    tracker_path = os.path.join(out, "tracker.json")
    atomic_write_text(tracker_path, json.dumps(state.tracker_table()))
    ckpt = os.path.join(out, "checkpoint.json")
    save_checkpoint(ckpt, spec, theta, step0 + opt.step_count)
    return StageResult("mpo", 0, {"checkpoint": ckpt, "metrics": metrics.path, "tracker": tracker_path},
                       {"trajectories": state.trajectories, "optimizer_steps": state.optimizer_steps})


def _run_eval(cfg):
    ec, out = cfg.eval, _stage_dir(cfg, "eval")
    spec, theta, _ = load_checkpoint(resolve_init(cfg, "eval"))
    result = evaluate(VelocityNet(spec), theta, cfg.task.condition_specs(), cfg.task.reward_specs(),
                      ec.samples, np.random.default_rng(cfg.seed), ec.ode_steps)
    path = os.path.join(out, "metrics.json")
    atomic_write_text(path, json.dumps(result, indent=2))
    return StageResult("eval", 0, {"metrics": path}, result)


def _run_gradcheck(cfg):
    gcc, out = cfg.gradcheck, _stage_dir(cfg, "gradcheck")
    report = gc.run_gradcheck(gcc.configs, h=gcc.h, seed=cfg.seed)
    report["tolerance"] = gcc.tolerance
    report["passed"] = report["max_rel_error"] < gcc.tolerance
    path = os.path.join(out, "report.json")
    atomic_write_text(path, json.dumps(report, indent=2))
    return StageResult("gradcheck", 0 if report["passed"] else 1, {"report": path}, report)


def _run_tokenize(cfg):
    out = [[s.to_dict() for s in segment_prompt(p)] for p in cfg.tokenize.prompts]
    return StageResult("tokenize", 0, {}, {"spans": out})

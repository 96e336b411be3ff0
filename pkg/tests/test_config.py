import json

import pytest

from flow_align.config import ExperimentConfig, apply_preset, from_dict, load_config
from flow_align.errors import ConfigurationError


def test_defaults_follow_on_policy_text():
    cfg = ExperimentConfig()
    assert cfg.grpo.optim.lr == 5e-6 and cfg.grpo.batch_size == 64 and cfg.grpo.iterations == 300
    assert cfg.mpo.optim.lr == 5e-6 and cfg.mpo.lam == 0.99 and cfg.mpo.gamma == 0.5
    assert (cfg.grpo.optim.beta1, cfg.grpo.optim.beta2, cfg.grpo.optim.weight_decay) == (0.9, 0.95, 0.01)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigurationError, match="unknown keys"):
        from_dict(ExperimentConfig, {"grpo": {"lr": 1.0}})
    with pytest.raises(ConfigurationError):
        from_dict(ExperimentConfig, {"bogus": 1})


def test_bad_values_rejected():
    with pytest.raises(ConfigurationError):
        from_dict(ExperimentConfig, {"stage": "finetune"})
    with pytest.raises(ConfigurationError):
        from_dict(ExperimentConfig, {"pretrain": {"optim": {"schedule": "step"}}})
    with pytest.raises(ConfigurationError):
        from_dict(ExperimentConfig, {"task": {"rewards": []}})


def test_nested_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 4, "dpo": {"beta_eff": 3.0, "optim": {"lr": 3e-4}}}))
    cfg = load_config(p)
    assert cfg.seed == 4 and cfg.dpo.beta_eff == 3.0 and cfg.dpo.optim.lr == 3e-4
    assert cfg.dpo.optim.weight_decay == 0.01


def test_round_trip_through_dict():
    cfg = ExperimentConfig(seed=9)
    assert from_dict(ExperimentConfig, json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_table_preset():
    cfg = apply_preset(ExperimentConfig(), "progressive")
    assert cfg.grpo.optim.lr == 1e-5 and cfg.grpo.batch_size == 32 and cfg.grpo.iterations == 300
    assert cfg.sft.optim.schedule == "cosine" and cfg.dpo.optim.warmup_steps == 1000
    cfg = apply_preset(cfg, "onpolicy")
    assert cfg.grpo.optim.lr == 5e-6 and cfg.grpo.batch_size == 64
    with pytest.raises(ConfigurationError):
        apply_preset(ExperimentConfig(), "bogus")


def test_desk_preset_matches_grpo_budget():
    cfg = apply_preset(ExperimentConfig(), "desk")
    assert cfg.mpo.iterations == cfg.grpo.iterations * cfg.grpo.batch_size
    assert cfg.dpo.beta_eff == 1.0 and cfg.grpo.optim.lr == 1e-3

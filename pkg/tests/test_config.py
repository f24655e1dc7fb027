import pytest

from curelab.config import ConfigError, Mode, RunConfig, dumps, from_dict, load


def test_defaults_mirror_the_hyperparameter_table():
    rc = RunConfig()
    assert rc.n_responses_per_prompt == 16 and rc.initial_rollouts == 4 and rc.reprompt_rollouts == 3
    assert (rc.clip_ratio_low, rc.clip_ratio_high) == (0.2, 0.28)
    assert rc.topk_entropy == 20 and rc.max_gen_batches == 10 and rc.kl_coeff == 0.0
    assert rc.warmup_steps == 10 and rc.loss_agg_mode == "token_mean"
    assert (rc.eval_temperature, rc.eval_top_p) == (0.6, 0.7)


def test_mode_wiring():
    rc = RunConfig()
    g = rc.train(Mode.GRPO)
    assert (g.eps_low, g.eps_high, g.loss_agg, g.filter_groups) == (0.2, 0.2, "sequence_mean", False)
    d = rc.train(Mode.DAPO)
    assert (d.eps_low, d.eps_high, d.loss_agg, d.filter_groups) == (0.2, 0.28, "token_mean", True)
    assert rc.branch(Mode.CURE_S1).group_size == 16 and rc.branch(Mode.CURE_S1).n2 == 3
    for m in (Mode.DAPO, Mode.CURE_S2, Mode.GRPO):
        assert rc.branch(m).n2 == 0 and rc.branch(m).group_size == 16


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})


def test_cross_field_validation():
    with pytest.raises(ConfigError, match="eps_high"):
        RunConfig(clip_ratio_high=1.5)
    with pytest.raises(ConfigError, match="n_responses_per_prompt"):
        RunConfig(initial_rollouts=5)
    with pytest.raises(ConfigError):
        RunConfig(train_groups=16, mini_batches=5)
    with pytest.raises(ConfigError):
        RunConfig(vocab_size=8)


def test_yaml_load_and_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 3\nlr: 5.0e-4\noverlong_buffer: true\nlabel: x\n")
    rc = load(path, {"seed": "4", "label": None})
    assert rc.seed == 4 and rc.lr == 5e-4 and rc.overlong_buffer is True and rc.label == "x"
    assert from_dict(__import__("json").loads(dumps(rc))) == rc
    (tmp_path / "bad.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load(tmp_path / "bad.yaml")

import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from markovcot import nn, tasks, trainer
from markovcot.errors import ConfigError, ContractError
from markovcot.seeding import derive_seed

from conftest import jittered, tiny_config


def small_config(variant="MarkovianGRPO", **kw) -> trainer.TrainConfig:
    base = dict(variant=variant, model=tiny_config(context_len=160), batch_size=4, steps=6, checkpoint_interval=2,
                pretrain_steps=0)
    base.update(kw)
    return trainer.TrainConfig(**base)


def setup(config, actor_seed=5):
    src = tasks.TaskSource(config.task)
    base = jittered(config.model, seed=4)
    h = trainer.make_handle(config, base, src)
    h.actor = jittered(config.model, seed=actor_seed)
    pair = src.pair(derive_seed(0, "pair", 0))
    return h, src, pair


# ---------------------------------------------------------------------------
# advantages


def test_standardize_hand_values():
    adv = trainer.standardize([0, 1, 2, 3], eps=0.0)
    assert adv.std == pytest.approx(1.1180, abs=1e-4)
    assert adv.advantages == pytest.approx([-1.3416, -0.4472, 0.4472, 1.3416], abs=1e-4)
    assert adv.detached


def test_standardize_degenerate_batch():
    adv = trainer.standardize([2.5] * 4)
    assert adv.advantages == [0.0] * 4


def test_standardize_needs_two():
    with pytest.raises(ConfigError):
        trainer.standardize([1.0])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=16), st.floats(-100, 100))
@settings(max_examples=200)
def test_standardize_properties(rewards, shift):
    eps = 1e-6
    a = trainer.standardize(rewards, eps)
    assert abs(np.mean(a.advantages)) <= 1e-9
    s = np.std(a.advantages)
    assert s == pytest.approx(a.std / (a.std + eps), rel=1e-9, abs=1e-12)
    if a.std > 1e3 * eps:
        assert 1 - 1e-3 < s <= 1.0
        b = trainer.standardize([r + shift for r in rewards], eps)
        assert np.allclose(a.advantages, b.advantages, atol=1e-6)
    order = np.argsort(rewards, kind="stable")
    assert all(a.advantages[order[i]] <= a.advantages[order[i + 1]] + 1e-12 for i in range(len(order) - 1))


def test_ema_baseline():
    assert trainer.ema_baseline([3.0] * 7, 0.9) == pytest.approx(3.0)
    assert trainer.ema_baseline([1.0, 2.0], 0.9) == pytest.approx((0.9 * 1 + 2) / 1.9)
    assert trainer.ema_baseline([1.0, 2.0], 0.9) == pytest.approx(1.5263, abs=1e-4)
    h = list(np.random.default_rng(0).normal(size=10))
    assert trainer.ema_baseline(h, 0.999) == pytest.approx(np.mean(h), abs=1e-3)
    with pytest.raises(ContractError):
        trainer.ema_baseline([], 0.9)


def test_ei_filter():
    assert trainer.ei_filter([-1.0, 1.0], [-1.0, 1.0], k=0.0) == [False, True]
    assert trainer.ei_filter([5.0, 6.0], [0.0, 1.0, 2.0], k=1e9) == [False, False]
    assert trainer.ei_filter([5.0], [1.0], k=1.0) == [False]
    assert trainer.ei_filter([5.0], [1.0], k=1.0, warmup_include=True) == [True]


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        trainer.TrainConfig(variant="PPO")
    with pytest.raises(ConfigError):
        trainer.TrainConfig(batch_size=1)
    trainer.TrainConfig(variant="PG_EMA", batch_size=1)
    with pytest.raises(ConfigError):
        trainer.TrainConfig(ema_rate=1.0)


def test_flat_config_roundtrip():
    c = small_config(lr=3e-4)
    flat = c.to_flat()
    assert trainer.TrainConfig.from_flat(json.loads(json.dumps(flat))) == c
    with pytest.raises(ConfigError, match="model.width"):
        trainer.TrainConfig.from_flat({"model.width": 3})


# ---------------------------------------------------------------------------
# losses and variants


def frozen_batch(h, pair, config, step=0):
    return trainer.draw_batch(h, pair, config, step)


def test_zero_advantage_and_beta_gives_zero_loss():
    config = small_config(beta_kl=0.0)
    h, _, pair = setup(config)
    batch = frozen_batch(h, pair, config)
    batch.cots = [batch.cots[0]] * len(batch.cots)
    tp = h.actor.trainable()
    loss = trainer.loss_components(h, tp, batch, config)
    assert float(loss.total.detach()) == 0.0
    g = nn.gradients(tp, loss.total)
    assert g.global_norm == 0.0


def test_no_reward_grad_same_values_different_gradients():
    config = small_config()
    h, _, pair = setup(config)
    batch = frozen_batch(h, pair, config)
    tp = h.actor.trainable()
    full = trainer.loss_components(h, tp, batch, config)
    ablated = trainer.loss_components(h, tp, batch, small_config("NoRewardGrad"))
    assert full.values() == ablated.values()
    g_full = nn.gradients(tp, full.total).grads
    tp2 = h.actor.trainable()
    g_abl = nn.gradients(tp2, trainer.loss_components(h, tp2, batch, small_config("NoRewardGrad")).total).grads
    assert any(not torch.equal(g_full[k], g_abl[k]) for k in g_full)
    tp3 = h.actor.trainable()
    ar = trainer.loss_components(h, tp3, batch, small_config("NoRewardGrad")).l_ar
    assert not ar.requires_grad or nn.gradients(tp3, ar).global_norm == 0.0


def test_unnormalized_differs_only_in_standardize():
    config = small_config()
    h, _, pair = setup(config)
    batch = frozen_batch(h, pair, config)
    calls = []

    def spy(rewards, eps, baseline=0.0):
        calls.append(list(rewards))
        return trainer.standardize(rewards, eps, baseline)

    trainer.loss_components(h, h.actor, batch, small_config("Unnormalized"), standardize_fn=spy)
    assert calls == []
    trainer.loss_components(h, h.actor, batch, config, standardize_fn=spy)
    assert len(calls) == 1

    def identity(rewards, eps, baseline=0.0):
        # mu = 0 and sigma + eps = 1 turn the standardized advantage into R - b
        return trainer.AdvantageBatch(list(rewards), baseline, 0.0, 1.0 - eps, list(rewards))

    tp = h.actor.trainable()
    a = trainer.loss_components(h, tp, batch, config, standardize_fn=identity)
    b = trainer.loss_components(h, tp, batch, small_config("Unnormalized"))
    assert a.values() == pytest.approx(b.values(), abs=1e-12)


def test_nonmarkovian_scores_with_the_question():
    config = small_config("NonMarkovianGRPO")
    h, _, pair = setup(config)
    batch = frozen_batch(h, pair, config)
    loss = trainer.loss_components(h, h.actor, batch, config)
    from markovcot import mlm

    expected = [mlm.score_answer_nonmarkovian(h, batch.question, c, batch.target) - batch.baseline_logprob
                for c in batch.cots]
    assert loss.rewards == pytest.approx(expected, abs=1e-12)


def test_pg_ema_closed_form_weights():
    config = small_config("PG_EMA", ema_rate=0.9)
    h, _, pair = setup(config)
    batch = frozen_batch(h, pair, config)
    assert len(batch.cots) == 1
    loss = trainer.loss_components(h, h.actor, batch, config, history=[1.0, 2.0])
    v = (0.9 * 1.0 + 1.0 * 2.0) / 1.9
    assert loss.advantages[0] == pytest.approx(loss.rewards[0] - v, abs=1e-12)
    assert float(loss.l_ar) == 0.0


def test_expert_iteration_huge_k_never_updates():
    config = small_config("ExpertIteration", ei_k=1e9, steps=8)
    h, src, _ = setup(config)
    state = trainer.TrainState(h.actor.clone(), nn.AdamState(), [], 0)
    digest = state.actor.digest()
    for s in range(8):
        state, m = trainer.train_step(h, state, src.pair(s), config)
        assert m["updated"] is False
    assert state.actor.digest() == digest
    assert len(state.history) == 8


def test_full_loss_finite_differences():
    config = small_config(model=tiny_config(context_len=160, d_model=8, n_heads=2, d_ff=16))
    h, _, pair = setup(config)
    batch = frozen_batch(h, pair, config)
    ref = trainer.loss_components(h, h.actor, batch, config)
    frozen = trainer.FrozenStats(ref.stats.mean, ref.stats.std, advantages=ref.advantages)
    fn = lambda p: trainer.loss_components(h, p, batch, config, frozen=frozen).total
    report = nn.finite_difference_check(h.actor, fn, probes=60, h=1e-4, seed=2)
    assert report.max_rel_error < 1e-4


def test_train_step_mechanics():
    config = small_config()
    h, src, _ = setup(config)
    h.actor = h.baseline.clone()
    state = trainer.TrainState(h.actor.clone(), nn.AdamState(), [], 0)
    for s in range(3):
        state, m = trainer.train_step(h, state, src.pair(s), config)
        assert m["n_actor_samples"] == config.batch_size and m["n_baseline_samples"] == 1
        assert abs(m["mean_advantage"]) <= 1e-9
        assert m["grad_norm_postclip"] <= 1.0 + 1e-9
        if s == 0:
            assert m["l_kl"] == 0.0


def test_null_training_reward_centered():
    config = small_config(lr=0.0, steps=128)
    h, src, _ = setup(config)
    h.actor = h.baseline.clone()
    state = trainer.TrainState(h.actor.clone(), nn.AdamState(), [], 0)
    means = []
    for s in range(128):
        state, m = trainer.train_step(h, state, src.pair(derive_seed(1, s)), config)
        means.append(m["mean_reward"])
    se = np.std(means, ddof=1) / math.sqrt(len(means))
    assert abs(np.mean(means)) <= 3 * se


# ---------------------------------------------------------------------------
# runs


def base_ckpt(tmp_path, config):
    path = tmp_path / "init.ckpt"
    nn.save_checkpoint(path, jittered(config.model, seed=4), step=0, seed=0)
    return str(path)


def test_run_directory_and_resume(tmp_path):
    config = small_config()
    config = small_config(init_checkpoint=base_ckpt(tmp_path, config), eval_interval=3, eval_size=4)
    full = trainer.train(config, tmp_path / "full")
    split = tmp_path / "split"
    trainer.train(config, split, stop_after=4)
    assert len(trainer.read_metrics(split)) == 4
    trainer.train(config, split, resume=True)
    assert (full / trainer.METRICS).read_bytes() == (split / trainer.METRICS).read_bytes()
    a = trainer.load_state(full / trainer.FINAL_CKPT)
    b = trainer.load_state(split / trainer.FINAL_CKPT)
    assert a.actor.digest() == b.actor.digest()
    rows = trainer.read_metrics(full)
    assert [r["step"] for r in rows] == list(range(6))
    assert ["accuracy" in r for r in rows] == [False, False, True, False, False, True]
    assert [s for s, _ in trainer.list_checkpoints(full)] == [0, 2, 4, 6]


def test_rerun_is_bitwise_identical(tmp_path):
    config = small_config()
    config = small_config(init_checkpoint=base_ckpt(tmp_path, config))
    trainer.train(config, tmp_path / "a")
    trainer.train(config, tmp_path / "b")
    assert (tmp_path / "a" / trainer.METRICS).read_bytes() == (tmp_path / "b" / trainer.METRICS).read_bytes()


def test_eval_interval_zero_disables_probes(tmp_path):
    config = small_config(eval_interval=0, steps=2)
    trainer.train(config, tmp_path / "r")
    assert all("accuracy" not in r for r in trainer.read_metrics(tmp_path / "r"))


def test_run_directory_is_never_overwritten(tmp_path):
    config = small_config(steps=1)
    trainer.train(config, tmp_path / "r")
    with pytest.raises(ConfigError):
        trainer.train(config, tmp_path / "r")


def test_resume_rejects_changed_config(tmp_path):
    config = small_config(steps=4)
    trainer.train(config, tmp_path / "r", stop_after=2)
    with pytest.raises(ConfigError):
        trainer.train(small_config(steps=4, lr=1e-3), tmp_path / "r", resume=True)


def test_manifest_roundtrip(tmp_path):
    config = small_config(steps=1)
    trainer.train(config, tmp_path / "r")
    m = trainer.read_manifest(tmp_path / "r" / trainer.MANIFEST)
    trainer.write_manifest(tmp_path / "copy.json", m)
    assert trainer.read_manifest(tmp_path / "copy.json") == m
    assert trainer.TrainConfig.from_flat(m["config"]) == config
    assert m["tokenizer"]["vocab_size"] == tasks.VOCAB_SIZE


def test_open_run_restores_final_actor(tmp_path):
    config = small_config(steps=2)
    trainer.train(config, tmp_path / "r")
    run = trainer.open_run(tmp_path / "r")
    final = trainer.load_state(tmp_path / "r" / trainer.FINAL_CKPT).actor
    assert run.handle.actor.digest() == final.digest()
    assert run.handle.baseline.digest() == nn.load_checkpoint(tmp_path / "r" / trainer.BASE_CKPT).params.digest()

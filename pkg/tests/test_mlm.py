import math

import pytest
import torch

from markovcot import mlm, nn, tasks
from markovcot.errors import ConfigError, ContractError
from markovcot.mlm import MLMHandle
from markovcot.seeding import derive_seed

from conftest import jittered, tiny_config
from test_nn import fixed_dist_model

Q = tasks.tokenize("3 + 4 + 5")
A = tasks.tokenize("12") + [tasks.EOS]


def test_cot_cap_bounds(cfg):
    p = jittered(cfg)
    with pytest.raises(ConfigError):
        MLMHandle.from_params(p, cot_cap=0)
    h = MLMHandle.from_params(p, cot_cap=1)
    for s in range(20):
        cot, _ = mlm.update_state(h, Q, seed=s)
        assert len(cot) <= 1


def test_cot_logprob_matches_rescoring(handle):
    for s in range(5):
        cot, lp = mlm.update_state(handle, Q, seed=s)
        event = handle.scored_cot(cot)
        again = float(nn.sequence_logprob(handle.actor, handle.cot_context(Q), event))
        assert lp == pytest.approx(again, abs=1e-9)


def test_stopped_cot_scores_its_stop_event(handle):
    cot = [5, 6]
    assert handle.scored_cot(cot) == [5, 6, handle.stop_token]
    full = list(range(10, 10 + handle.cot_cap))
    assert handle.scored_cot(full) == full


def test_seeds_give_different_cots(handle):
    cots = {tuple(mlm.update_state(handle, Q, seed=s)[0]) for s in range(100)}
    assert len(cots) > 1


def test_update_state_deterministic(handle):
    assert mlm.update_state(handle, Q, 42) == mlm.update_state(handle, Q, 42)


def test_markovian_scoring_is_pure(handle):
    cot = tasks.tokenize("3 + 4")
    assert mlm.score_answer_markovian(handle, cot, A) == mlm.score_answer_markovian(handle, cot, A)


def test_markovian_context_hides_the_question(handle):
    cot = tasks.tokenize("abc")
    ctx = mlm.markovian_context(handle, cot)
    assert ctx == cot + list(handle.answer_cue)
    with pytest.raises(ContractError):
        mlm.score_answer_markovian(handle, handle.cot_context(Q) + cot, A, question=Q)


def test_nonmarkovian_differs(handle):
    cot = tasks.tokenize("abc")
    m = mlm.score_answer_markovian(handle, cot, A)
    nm = mlm.score_answer_nonmarkovian(handle, Q, cot, A)
    assert m != nm


def test_nonmarkovian_empty_cot(handle):
    nm = mlm.score_answer_nonmarkovian(handle, Q, [], A)
    direct = float(nn.sequence_logprob(handle.actor, handle.cot_context(Q) + list(handle.answer_cue), A))
    assert nm == direct


def test_uniform_model_scores():
    cfg = tiny_config(vocab_size=10)
    h = MLMHandle.from_params(nn.init_params(cfg, zero=True), cot_cap=3)
    m = mlm.score_answer_markovian(h, [1, 2], [4])
    nm = mlm.score_answer_nonmarkovian(h, [7, 8], [1, 2], [4])
    assert m == pytest.approx(math.log(1 / 10), abs=1e-12)
    assert nm == pytest.approx(m, abs=1e-12)


def test_empty_answer_rejected(handle):
    with pytest.raises(ContractError):
        mlm.score_answer_markovian(handle, [1], [])


def test_baseline_frozen_over_many_calls(handle):
    digest = handle.baseline.digest()
    for s in range(1000):
        mlm.score_answer_markovian(handle, [s % 40, 3], A, params=handle.baseline)
    mlm.sample_baseline_cot(handle, Q, seed=1)
    assert handle.baseline.digest() == digest
    handle.verify_baseline()
    handle.baseline.tensors["ln_f.b"][0] += 1.0
    with pytest.raises(ContractError):
        handle.verify_baseline()


def test_actor_equals_baseline_at_construction(cfg):
    h = MLMHandle.from_params(jittered(cfg), cot_cap=6)
    for s in range(10):
        a = mlm.sample_cots(h, h.actor, Q, [s])[0]
        b = mlm.sample_baseline_cot(h, Q, s)
        assert a == b


def test_reward_zero_for_identical_models(cfg):
    h = MLMHandle.from_params(jittered(cfg), cot_cap=6)
    cot, _ = mlm.update_state(h, Q, derive_seed(3, "actor", 1))
    ep = mlm.run_episode(h, Q, A, seed=3, baseline_cot=cot)
    assert ep.cot == ep.baseline_cot
    assert ep.reward == 0.0


def test_reward_hand_value():
    actor = fixed_dist_model([math.log(0.5), math.log(0.25), math.log(0.25)])
    base = fixed_dist_model([math.log(0.25), math.log(0.5), math.log(0.25)])
    h = MLMHandle(actor, base, cot_cap=1)
    r = mlm.score_answer_markovian(h, [1], [0])
    b = mlm.score_answer_markovian(h, [2], [0], params=base)
    assert mlm.compute_reward(r, b) == pytest.approx(math.log(2), abs=1e-12)


def test_reward_invariant_to_logit_shift():
    lp_a = [math.log(0.5), math.log(0.3), math.log(0.2)]
    lp_b = [math.log(0.2), math.log(0.2), math.log(0.6)]

    def reward(shift):
        a = fixed_dist_model([x + shift for x in lp_a])
        b = fixed_dist_model([x + shift for x in lp_b])
        h = MLMHandle(a, b, cot_cap=1)
        return mlm.compute_reward(mlm.score_answer_markovian(h, [1], [0]),
                                  mlm.score_answer_markovian(h, [2], [0], params=b))

    assert reward(3.0) == pytest.approx(reward(0.0), abs=1e-12)


def test_budget_check(cfg):
    h = MLMHandle.from_params(jittered(cfg), cot_cap=cfg.context_len)
    with pytest.raises(ConfigError):
        h.check_budget(Q, len(A))


def test_episode_json_roundtrip(handle):
    ep = mlm.run_episode(handle, Q, A, seed=5)
    assert mlm.MarkovianEpisode.from_json(ep.to_json()) == ep


def test_two_step_rollout_is_one_episode(handle):
    traj = mlm.rollout_trajectory(handle, [Q, A], seed=8)
    ep = mlm.run_episode(handle, Q, A, seed=8)
    assert traj.states[1] == ep.cot and traj.baseline_states[1] == ep.baseline_cot
    assert traj.step_rewards == [ep.reward]


def test_three_step_rollout_sums_step_rewards(handle):
    obs = [Q, tasks.tokenize("12"), tasks.tokenize("ok")]
    traj = mlm.rollout_trajectory(handle, obs, seed=4)
    manual = []
    for t in (1, 2):
        a = mlm.score_answer_markovian(handle, traj.states[t], obs[t])
        b = mlm.score_answer_markovian(handle, traj.baseline_states[t], obs[t], params=handle.baseline)
        manual.append(a - b)
    assert traj.total_reward == pytest.approx(sum(manual), abs=1e-9)
    # each state is sampled from the previous observation and state only
    ctx = list(obs[1]) + traj.states[1]
    assert traj.states[2] == nn.sample_batch(handle.actor, [ctx], handle.cot_cap, 1.0,
                                             [derive_seed(4, "actor", 2)], handle.stop_token)[0]


def test_rollout_needs_two_observations(handle):
    with pytest.raises(ContractError):
        mlm.rollout_trajectory(handle, [Q], seed=0)


def test_answer_logprob_batch_selects_context(handle):
    cots = [[5, 6], [7]]
    m = mlm.answer_logprob_batch(handle, handle.actor, cots, A)
    nm = mlm.answer_logprob_batch(handle, handle.actor, cots, A, questions=[Q, Q])
    for i, c in enumerate(cots):
        assert float(m[i]) == pytest.approx(mlm.score_answer_markovian(handle, c, A), abs=1e-12)
        assert float(nm[i]) == pytest.approx(mlm.score_answer_nonmarkovian(handle, Q, c, A), abs=1e-12)
    assert isinstance(m, torch.Tensor)

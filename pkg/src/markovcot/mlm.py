"""Markovian language model: state update u, CoT-only answer policy pi,
the frozen baseline pair and the informativeness reward.

The actor and baseline are two parameter sets of the same network. The
state update samples a CoT from ``question + cot_init``; the Markovian
answer policy sees the CoT and nothing else, while the Non-Markovian
variant sees ``question + cot_init + cot``. Both answer contexts end with
a fixed answer cue (possibly empty) that carries no question information.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch

from . import nn
from .errors import ConfigError, ContractError
from .nn import ModelParams, TokenSeq
from .seeding import derive_seed


@dataclass
class MLMHandle:
    actor: ModelParams
    baseline: ModelParams
    cot_cap: int
    cot_init: tuple[int, ...] = ()
    stop_token: int | None = None
    answer_cue: tuple[int, ...] = ()
    baseline_digest: str = field(default="", repr=False)

    def __post_init__(self):
        if self.cot_cap < 1:
            raise ConfigError("cot_cap K must be >= 1")
        self.cot_init = tuple(int(t) for t in self.cot_init)
        self.answer_cue = tuple(int(t) for t in self.answer_cue)
        self.baseline = self.baseline.clone()
        self.baseline_digest = self.baseline.digest()

    @classmethod
    def from_params(cls, params: ModelParams, cot_cap: int, cot_init: Sequence[int] = (),
                    stop_token: int | None = None, answer_cue: Sequence[int] = ()) -> "MLMHandle":
        """Actor and frozen baseline both start from ``params``."""
        return cls(params.clone(), params, cot_cap, tuple(cot_init), stop_token, tuple(answer_cue))

    def verify_baseline(self) -> None:
        if self.baseline.digest() != self.baseline_digest:
            raise ContractError("frozen baseline parameters changed")

    def cot_context(self, question: TokenSeq) -> list[int]:
        return list(question) + list(self.cot_init)

    def check_budget(self, question: TokenSeq, answer_len: int) -> None:
        cfg = self.actor.config
        need = len(question) + len(self.cot_init) + self.cot_cap + len(self.answer_cue) + answer_len
        if need > cfg.context_len:
            raise ConfigError(
                f"context_len {cfg.context_len} < |q| + |cot_init| + K + |cue| + |answer| = {need}"
            )

    def scored_cot(self, cot: TokenSeq) -> list[int]:
        """The CoT event whose probability was sampled: a stopped CoT includes its stop token."""
        cot = list(cot)
        if self.stop_token is not None and len(cot) < self.cot_cap:
            return cot + [self.stop_token]
        return cot


# ---------------------------------------------------------------------------
# state update


def sample_cots(handle: MLMHandle, params: ModelParams, question: TokenSeq,
                seeds: Sequence[int], temperature: float = 1.0) -> list[list[int]]:
    ctx = handle.cot_context(question)
    return nn.sample_batch(params, [ctx] * len(seeds), handle.cot_cap, temperature, list(seeds),
                           handle.stop_token)


def cot_logprob_batch(handle: MLMHandle, params: ModelParams, questions: Sequence[TokenSeq],
                      cots: Sequence[TokenSeq]) -> torch.Tensor:
    """``ln u(CoT | q, s1)`` per row, differentiable in ``params``."""
    ctxs = [handle.cot_context(q) for q in questions]
    events = [handle.scored_cot(c) for c in cots]
    out = torch.zeros(len(cots), dtype=params.config.torch_dtype)
    keep = [i for i, e in enumerate(events) if e]
    if not keep:
        return out
    lp = nn.sequence_logprob_batch(params, [ctxs[i] for i in keep], [events[i] for i in keep])
    return out.index_copy(0, torch.as_tensor(keep), lp)


def update_state(handle: MLMHandle, question: TokenSeq, seed: int,
                 temperature: float = 1.0) -> tuple[list[int], float]:
    """Sample ``s2 ~ u_theta(. | q, s1)`` with up to K tokens."""
    if len(handle.cot_context(question)) + handle.cot_cap > handle.actor.config.context_len:
        raise ConfigError("question + cot_init + K exceeds the model context")
    cot = sample_cots(handle, handle.actor, question, [seed], temperature)[0]
    with torch.no_grad():
        lp = float(cot_logprob_batch(handle, handle.actor, [question], [cot])[0])
    return cot, lp


def sample_baseline_cot(handle: MLMHandle, question: TokenSeq, seed: int,
                        temperature: float = 1.0) -> list[int]:
    handle.verify_baseline()
    return sample_cots(handle, handle.baseline, question, [seed], temperature)[0]


# ---------------------------------------------------------------------------
# answer policy


def markovian_context(handle: MLMHandle, cot: TokenSeq) -> list[int]:
    return list(cot) + list(handle.answer_cue)


def nonmarkovian_context(handle: MLMHandle, question: TokenSeq, cot: TokenSeq) -> list[int]:
    return list(question) + list(handle.cot_init) + list(cot) + list(handle.answer_cue)


def answer_logprob_batch(handle: MLMHandle, params: ModelParams, cots: Sequence[TokenSeq],
                         answer: TokenSeq, questions: Sequence[TokenSeq] | None = None) -> torch.Tensor:
    """``ln pi(ans | CoT)``; passing ``questions`` selects the Non-Markovian context."""
    if questions is None:
        ctxs = [markovian_context(handle, c) for c in cots]
    else:
        ctxs = [nonmarkovian_context(handle, q, c) for q, c in zip(questions, cots)]
    return nn.sequence_logprob_batch(params, ctxs, [answer] * len(cots))


def score_answer_markovian(handle: MLMHandle, cot: TokenSeq, answer: TokenSeq,
                           params: ModelParams | None = None,
                           question: TokenSeq | None = None) -> float:
    """Answer log-prob from the CoT alone.

    ``question`` is accepted only as a guard: a context that begins with
    ``question + cot_init`` means a Non-Markovian context was passed in.
    """
    if not answer:
        raise ContractError("answer must be nonempty")
    if question is not None:
        prefix = handle.cot_context(question)
        if prefix and list(cot[: len(prefix)]) == prefix:
            raise ContractError("question tokens found in the Markovian answer context")
    params = handle.actor if params is None else params
    with torch.no_grad():
        return float(nn.sequence_logprob(params, markovian_context(handle, cot), answer))


def score_answer_nonmarkovian(handle: MLMHandle, question: TokenSeq, cot: TokenSeq,
                              answer: TokenSeq, params: ModelParams | None = None) -> float:
    if not answer:
        raise ContractError("answer must be nonempty")
    params = handle.actor if params is None else params
    with torch.no_grad():
        return float(nn.sequence_logprob(params, nonmarkovian_context(handle, question, cot), answer))


def compute_reward(actor_answer_logprob: float, baseline_answer_logprob: float) -> float:
    """``R = ln pi_theta(ans | CoT) - ln pi'(ans | CoT')``."""
    return actor_answer_logprob - baseline_answer_logprob


# ---------------------------------------------------------------------------
# episodes


@dataclass
class MarkovianEpisode:
    question: list[int]
    cot: list[int]
    answer: list[int]
    cot_logprob: float
    answer_logprob_markovian: float
    baseline_cot: list[int]
    baseline_answer_logprob: float
    reward: float

    def to_json(self) -> str:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float):
                d[k] = v.hex()
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MarkovianEpisode":
        d = json.loads(line)
        for k in ("cot_logprob", "answer_logprob_markovian", "baseline_answer_logprob", "reward"):
            d[k] = float.fromhex(d[k])
        return cls(**d)


def run_episode(handle: MLMHandle, question: TokenSeq, answer: TokenSeq, seed: int,
                baseline_cot: TokenSeq | None = None) -> MarkovianEpisode:
    """One QA episode; the baseline CoT is sampled unless supplied."""
    cot, cot_lp = update_state(handle, question, derive_seed(seed, "actor", 1))
    if baseline_cot is None:
        baseline_cot = sample_baseline_cot(handle, question, derive_seed(seed, "baseline", 1))
    r = score_answer_markovian(handle, cot, answer)
    b = score_answer_markovian(handle, baseline_cot, answer, params=handle.baseline)
    return MarkovianEpisode(list(question), cot, list(answer), cot_lp, r, list(baseline_cot), b,
                            compute_reward(r, b))


# ---------------------------------------------------------------------------
# multi-step trajectories


@dataclass
class Trajectory:
    observations: list[list[int]]
    states: list[list[int]]
    baseline_states: list[list[int]]
    actor_scores: list[float]
    baseline_scores: list[float]
    step_rewards: list[float]

    @property
    def total_reward(self) -> float:
        return sum(self.step_rewards)


def rollout_trajectory(handle: MLMHandle, observations: Sequence[TokenSeq], seed: int) -> Trajectory:
    """``s_{t+1} ~ u(x_t, s_t)`` with reward summed over predicted observations.

    Observation ``x_1`` is given, not predicted, so per-step rewards start at
    ``t = 2``; with ``T = 2`` this is exactly the QA episode. Baseline states
    follow the same observations through their own sampler streams.
    """
    if len(observations) < 2:
        raise ContractError("trajectories need T >= 2 observations")
    s1 = list(handle.cot_init)
    states, bstates = [s1], [s1]
    actor_scores, base_scores, rewards = [], [], []
    handle.verify_baseline()
    for t in range(1, len(observations)):
        x_prev = list(observations[t - 1])
        for params, seq, tag in ((handle.actor, states, "actor"), (handle.baseline, bstates, "baseline")):
            ctx = x_prev + seq[-1]
            if len(ctx) + handle.cot_cap > params.config.context_len:
                raise ConfigError(f"trajectory context overflow at step {t}")
            seq.append(nn.sample_batch(params, [ctx], handle.cot_cap, 1.0,
                                       [derive_seed(seed, tag, t)], handle.stop_token)[0])
        x_t = list(observations[t])
        with torch.no_grad():
            a = float(nn.sequence_logprob(handle.actor, markovian_context(handle, states[-1]), x_t))
            b = float(nn.sequence_logprob(handle.baseline, markovian_context(handle, bstates[-1]), x_t))
        actor_scores.append(a)
        base_scores.append(b)
        rewards.append(compute_reward(a, b))
    return Trajectory([list(o) for o in observations], states, bstates, actor_scores, base_scores, rewards)

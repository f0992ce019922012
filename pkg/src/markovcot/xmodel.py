"""Cross-model CoT transfer: score an actor's CoTs with frozen critic models
across its training checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from . import nn, tasks
from .errors import ConfigError, ContractError
from .mlm import MLMHandle
from .nn import ModelConfig, ModelParams
from .pretrain import pretrain_lm
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CriticSpec:
    critic_id: str
    model: ModelConfig
    pretrain_steps: int = 1000
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    pretrain_docs: int = 20000
    pretrain_copy_rate: float = 0.2
    pretrain_seed: int = 1
    frozen: bool = True


def same_arch_critic(model: ModelConfig, seed: int, **kw) -> CriticSpec:
    cfg = ModelConfig(**{**model.to_dict(), "init_seed": seed})
    return CriticSpec(f"same-arch-seed{seed}", cfg, pretrain_seed=seed, **kw)


def half_size_critic(model: ModelConfig, seed: int, **kw) -> CriticSpec:
    heads = max(1, model.n_heads // 2)
    d = max(heads, model.d_model // 2)
    cfg = ModelConfig(**{**model.to_dict(), "d_model": d - d % heads, "n_layers": max(1, model.n_layers // 2),
                         "n_heads": heads, "d_ff": max(1, model.d_ff // 2), "init_seed": seed})
    return CriticSpec(f"half-size-seed{seed}", cfg, pretrain_seed=seed, **kw)


def build_critic(spec: CriticSpec, source: tasks.TaskSource) -> ModelParams:
    """Fresh init plus plain next-token pre-training on the task corpus."""
    params = nn.init_params(spec.model)
    if spec.pretrain_steps > 0:
        docs = source.pretrain_docs(spec.pretrain_docs, spec.pretrain_seed, spec.pretrain_copy_rate)
        params, _ = pretrain_lm(params, docs, spec.pretrain_steps, spec.pretrain_batch, spec.pretrain_lr,
                                seed=spec.pretrain_seed)
    return params


@dataclass
class Episode:
    question: list[int]
    answer: list[int]
    cot: list[int]
    baseline_cot: list[int]
    cue: list[int] = field(default_factory=list)

    def contexts(self) -> tuple[list[int], list[int]]:
        return self.cot + self.cue, self.baseline_cot + self.cue


def collect_episodes(handle: MLMHandle, actor: ModelParams, pairs: Sequence[tasks.QAPair],
                     seed: int, temperature: float = 1.0) -> list[Episode]:
    """Actor CoTs and frozen-baseline CoT's for fixed pairs and derived seeds."""
    ctxs = [handle.cot_context(p.question_ids) for p in pairs]
    a_seeds = [derive_seed(seed, "xmodel-actor", i) for i in range(len(pairs))]
    b_seeds = [derive_seed(seed, "xmodel-baseline", i) for i in range(len(pairs))]
    cots = nn.sample_batch(actor, ctxs, handle.cot_cap, temperature, a_seeds, handle.stop_token)
    handle.verify_baseline()
    bcots = nn.sample_batch(handle.baseline, ctxs, handle.cot_cap, temperature, b_seeds, handle.stop_token)
    cue = list(handle.answer_cue)
    return [Episode(list(p.question_ids), list(p.target_ids), c, b, cue) for p, c, b in zip(pairs, cots, bcots)]


@dataclass
class CriticScore:
    mean: float
    n: int
    skipped: int


def critic_normalized_reward(critic: ModelParams, episodes: Sequence[Episode]) -> CriticScore:
    """Mean of ``ln pi_c(a | CoT) - ln pi_c(a | CoT')``.

    Contexts are the CoT plus the actor's answer cue, exactly as the actor's
    Markovian answer policy sees them.
    """
    digest = critic.digest()
    limit = critic.config.context_len
    keep = [e for e in episodes if max(len(e.cot), len(e.baseline_cot)) + len(e.cue) + len(e.answer) <= limit]
    skipped = len(episodes) - len(keep)
    if skipped:
        log.warning("%d episodes exceed the critic context of %d tokens and were skipped", skipped, limit)
    if not keep:
        return CriticScore(math.nan, 0, skipped)
    with torch.no_grad():
        r = nn.sequence_logprob_batch(critic, [e.contexts()[0] for e in keep], [e.answer for e in keep])
        b = nn.sequence_logprob_batch(critic, [e.contexts()[1] for e in keep], [e.answer for e in keep])
    if critic.digest() != digest:
        raise ContractError("critic parameters changed during scoring")
    return CriticScore(float((r - b).mean()), len(keep), skipped)


def moving_average(series: Sequence[float], window: int = 40) -> list[float]:
    """Trailing mean over the last ``window`` points (fewer at the start)."""
    if window < 1:
        raise ConfigError("smoothing window must be >= 1")
    x = [float(v) for v in series]
    out = []
    for t in range(len(x)):
        part = x[max(0, t + 1 - window) : t + 1]
        out.append(math.fsum(part) / len(part))
    return out


def spearman(a: Sequence[float], b: Sequence[float]) -> float | None:
    """Rank correlation, or None when either series is constant."""
    if len(a) != len(b):
        raise ConfigError("series lengths differ")
    if len(set(a)) < 2 or len(set(b)) < 2:
        return None
    return float(stats.spearmanr(a, b).statistic)


@dataclass
class TransferReport:
    steps: list[int]
    series: dict[str, list[float]]
    counts: dict[str, list[int]]
    smoothed: dict[str, list[float]]
    correlations: dict[str, float | None]
    window: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checkpoint_step", "critic_id", "mean_normalized_reward", "n"])
        for cid, vals in self.series.items():
            for step, v, n in zip(self.steps, vals, self.counts[cid]):
                w.writerow([step, cid, repr(v), n])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"window": self.window, "n_checkpoints": len(self.steps), "spearman": self.correlations}

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "transfer_series.csv").write_text(self.to_csv())
        (out / "transfer_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


ACTOR_ID = "actor"


def transfer_report(handle: MLMHandle, checkpoints: Sequence[tuple[int, ModelParams]],
                    critics: dict[str, ModelParams], pairs: Sequence[tasks.QAPair], seed: int = 0,
                    window: int = 40) -> TransferReport:
    """Actor and critic normalized-reward series over checkpoints.

    The actor series scores each checkpoint's episodes with that same
    checkpoint, using the critic formula, so every series is comparable.
    Correlations are Spearman between the smoothed actor and critic series.
    """
    if len(checkpoints) < 3:
        raise ConfigError("transfer_report needs at least 3 checkpoints")
    steps = [s for s, _ in checkpoints]
    series = {ACTOR_ID: [], **{c: [] for c in critics}}
    counts = {k: [] for k in series}
    for step, params in checkpoints:
        episodes = collect_episodes(handle, params, pairs, seed)
        for cid, critic in [(ACTOR_ID, params), *critics.items()]:
            sc = critic_normalized_reward(critic, episodes)
            series[cid].append(sc.mean)
            counts[cid].append(sc.n)
    smoothed = {k: moving_average(v, window) for k, v in series.items()}
    corr = {c: spearman(smoothed[ACTOR_ID], smoothed[c]) for c in critics}
    return TransferReport(steps, series, counts, smoothed, corr, window)

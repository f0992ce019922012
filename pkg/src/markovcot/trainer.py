"""GRPO-style Markovian training and its ablation variants.

One training step draws a single (q, a) pair, samples ``B`` actor CoTs and
one frozen-baseline CoT', scores the answer under each, standardizes the
rewards within the batch and minimises

    L = L_PG + L_AR + L_KL
    L_PG = -ln u(CoT | q, s1) * A.detach()
    L_AR = -w * A            (gradient flows through ln pi(ans | CoT) only)
    L_KL = beta * KL(u_theta || u') along the sampled CoT

averaged over the batch, followed by gradient clipping and an Adam step.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__, mlm, nn, tasks
from .errors import ConfigError, ContractError, NumericError
from .mlm import MLMHandle
from .nn import AdamHyper, AdamState, ModelConfig, ModelParams
from .pretrain import pretrain_lm
from .seeding import derive_seed

log = logging.getLogger(__name__)

VARIANTS = ("MarkovianGRPO", "NonMarkovianGRPO", "PG_EMA", "ExpertIteration", "NoRewardGrad", "Unnormalized")
GROUP_VARIANTS = ("MarkovianGRPO", "NonMarkovianGRPO", "NoRewardGrad", "Unnormalized")
SINGLE_SAMPLE_VARIANTS = ("PG_EMA", "ExpertIteration")


def default_model() -> ModelConfig:
    """Small enough to pre-train and RL-train on one CPU core in minutes."""
    return ModelConfig(vocab_size=tasks.VOCAB_SIZE, context_len=160, d_model=64, n_layers=2, n_heads=4,
                       d_ff=256, dtype="float32")


@dataclass
class TrainConfig:
    variant: str = "MarkovianGRPO"
    batch_size: int = 8
    beta_kl: float = 0.1
    adv_eps: float = 1e-6
    actor_reward_weight: float = 1.0
    ema_rate: float = 0.9
    ei_k: float = 1.0
    steps: int = 2000
    lr: float = 1e-4
    grad_clip: float = 1.0
    temperature: float = 1.0
    run_seed: int = 0
    eval_interval: int = 0
    eval_size: int = 64
    checkpoint_interval: int = 200
    # base model: loaded from init_checkpoint, else pre-trained from scratch
    init_checkpoint: str = ""
    pretrain_steps: int = 0
    pretrain_batch: int = 32
    pretrain_lr: float = 1e-3
    pretrain_docs: int = 20000
    pretrain_copy_rate: float = 0.2
    pretrain_seed: int = 0
    model: ModelConfig = field(default_factory=default_model)
    task: tasks.TaskSpec = field(default_factory=tasks.TaskSpec)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.task, dict):
            self.task = tasks.TaskSpec(**self.task)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.variant in GROUP_VARIANTS and self.batch_size < 2:
            raise ConfigError("batch_size: standardized variants need B >= 2")
        if not 0 < self.ema_rate < 1:
            raise ConfigError("ema_rate must lie in (0, 1)")
        if self.adv_eps <= 0:
            raise ConfigError("adv_eps must be positive")
        if self.beta_kl < 0:
            raise ConfigError("beta_kl must be nonnegative")
        if self.steps < 0 or self.checkpoint_interval < 1:
            raise ConfigError("steps must be >= 0 and checkpoint_interval >= 1")
        if self.task.kind == "micro":
            raise ConfigError("task.kind: micro tasks are for the oracle, not for training")

    @property
    def samples_per_step(self) -> int:
        return 1 if self.variant in SINGLE_SAMPLE_VARIANTS else self.batch_size

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for k, sub in dataclasses.asdict(v).items():
                    out[f"{f.name}.{k}"] = sub
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        top, model, task = {}, {}, {}
        names = {f.name for f in dataclasses.fields(cls)}
        mnames = {f.name for f in dataclasses.fields(ModelConfig)}
        tnames = {f.name for f in dataclasses.fields(tasks.TaskSpec)}
        for key, v in flat.items():
            head, _, rest = key.partition(".")
            if head == "model" and rest in mnames:
                model[rest] = v
            elif head == "task" and rest in tnames:
                task[rest] = v
            elif not rest and key in names - {"model", "task"}:
                top[key] = v
            else:
                raise ConfigError(f"{key}: unknown configuration key")
        base = cls()
        m = dataclasses.replace(base.model, **model) if model else base.model
        t = dataclasses.replace(base.task, **task) if task else base.task
        return cls(**top, model=m, task=t)


# ---------------------------------------------------------------------------
# advantages


@dataclass
class AdvantageBatch:
    rewards: list[float]
    baseline: float
    mean: float
    std: float
    advantages: list[float]
    detached: bool = True


def standardize(rewards: Sequence[float], eps: float = 1e-6, baseline: float = 0.0) -> AdvantageBatch:
    """``A_i = (R_i - mu) / (sigma + eps)`` with the population std.

    mu and sigma are plain floats: they never carry gradient.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ConfigError("standardize needs a batch of at least 2 rewards")
    mu = float(r.mean())
    # exact ties must give sigma == 0, not the roundoff of a rounded mean
    sigma = 0.0 if r.max() == r.min() else float(r.std())
    adv = (r - mu) / (sigma + eps)
    adv -= adv.mean()  # cancels the roundoff left by the rounded mean
    return AdvantageBatch([float(x) for x in r], baseline, mu, sigma, [float(a) for a in adv])


def ema_baseline(history: Sequence[float], rate: float = 0.9) -> float:
    """``V_t = sum_i w_i R_i`` with ``w_i proportional to rate**(t-1-i)``."""
    if not history:
        raise ContractError("EMA baseline is undefined for an empty history")
    h = np.asarray(history, dtype=np.float64)
    w = rate ** np.arange(len(h) - 1, -1, -1, dtype=np.float64)
    return float((w * h).sum() / w.sum())


def ei_threshold(history: Sequence[float], k: float) -> float:
    h = np.asarray(history, dtype=np.float64)
    return float(h.mean() + k * h.std())


def ei_filter(rewards: Sequence[float], history: Sequence[float], k: float = 1.0,
              warmup_include: bool = False) -> list[bool]:
    """Keep episodes with ``R > mu_hist + k * sigma_hist`` (strict).

    With fewer than two past rewards the threshold is undefined; the
    warm-up rule then keeps nothing unless ``warmup_include`` is set.
    """
    if len(history) < 2:
        log.info("expert iteration warm-up: history has %d rewards", len(history))
        return [bool(warmup_include)] * len(rewards)
    tau = ei_threshold(history, k)
    return [bool(r > tau) for r in rewards]


# ---------------------------------------------------------------------------
# losses


@dataclass
class SampledBatch:
    """Everything stochastic about one step, frozen for loss evaluation."""

    question: list[int]
    target: list[int]
    cots: list[list[int]]
    baseline_cot: list[int]
    baseline_logprob: float


@dataclass
class LossBreakdown:
    l_pg: torch.Tensor
    l_ar: torch.Tensor
    l_kl: torch.Tensor
    total: torch.Tensor
    rewards: list[float]
    advantages: list[float]
    mask: list[bool]
    kl: list[float]
    stats: AdvantageBatch | None = None

    def values(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("l_pg", "l_ar", "l_kl", "total")}


@dataclass
class FrozenStats:
    """Stop-gradient constants for a batch; lets callers pin mu and sigma."""

    mean: float
    std: float
    ema: float | None = None
    # pins the policy-gradient weights too, so the surrogate's value and its
    # autograd gradient describe the same function
    advantages: list[float] | None = None


def loss_components(
    handle: MLMHandle,
    params: ModelParams,
    batch: SampledBatch,
    config: TrainConfig,
    history: Sequence[float] = (),
    frozen: FrozenStats | None = None,
    standardize_fn: Callable[..., AdvantageBatch] | None = None,
) -> LossBreakdown:
    """Compose the per-batch loss for ``config.variant`` from frozen samples.

    ``frozen`` replaces the batch statistics (mu, sigma, or the EMA value)
    so that the loss is a deterministic function of ``params`` alone; the
    finite-difference harness and the stop-gradient test rely on that.
    """
    variant = config.variant
    n = len(batch.cots)
    q = batch.question
    beta = config.beta_kl
    ctx = handle.cot_context(q)
    events = [handle.scored_cot(c) for c in batch.cots]
    cot_lp, kl = nn.logprob_and_kl_batch(params, handle.baseline if beta > 0 else None, [ctx] * n, events)
    nonmarkov = variant == "NonMarkovianGRPO"
    r = mlm.answer_logprob_batch(handle, params, batch.cots, batch.target,
                                 questions=[q] * n if nonmarkov else None)
    b = batch.baseline_logprob
    rewards = [float(x) - b for x in r.detach()]
    # advantages live in float64 whatever the model dtype, so their batch
    # mean is zero to float64 precision
    r = r.to(torch.float64)
    mask = [True] * n
    stats = None
    use_ar = True
    if variant in ("MarkovianGRPO", "NonMarkovianGRPO", "NoRewardGrad"):
        if frozen is None:
            stats = (standardize_fn or standardize)(rewards, config.adv_eps, baseline=b)
            mu, sigma = stats.mean, stats.std
        else:
            mu, sigma = frozen.mean, frozen.std
        if sigma == 0.0:
            # identical rewards: every advantage is 0 and the step is KL only
            a_grad = torch.zeros_like(r)
        else:
            a_grad = (r - b - mu) / (sigma + config.adv_eps)
            if stats is not None:
                # value: the standardized advantages exactly; gradient: grad R / (sigma + eps)
                a_grad = (a_grad - a_grad.detach()) + torch.as_tensor(stats.advantages, dtype=torch.float64)
        if variant == "NoRewardGrad":
            a_grad = a_grad.detach()
    elif variant == "Unnormalized":
        a_grad = r - b
    else:
        if frozen is not None and frozen.ema is not None:
            v = frozen.ema
        else:
            v = ema_baseline(history, config.ema_rate) if history else 0.0
        a_grad = (r - b - v).detach()
        use_ar = False
        if variant == "ExpertIteration":
            mask = ei_filter(rewards, history, config.ei_k)
    a_det = a_grad.detach()
    if frozen is not None and frozen.advantages is not None:
        a_det = torch.as_tensor(frozen.advantages, dtype=a_det.dtype)
    m = torch.as_tensor(mask, dtype=a_det.dtype)
    l_pg = (-cot_lp * a_det * m).mean()
    if use_ar:
        l_ar = -config.actor_reward_weight * a_grad.mean()
    else:
        l_ar = torch.zeros((), dtype=a_det.dtype)
    l_kl = beta * (kl * m).mean()
    total = l_pg + l_ar + l_kl
    return LossBreakdown(l_pg, l_ar, l_kl, total, rewards, [float(a) for a in a_det], mask,
                         [float(x) for x in kl.detach()], stats)


# ---------------------------------------------------------------------------
# training state and steps


@dataclass
class TrainState:
    actor: ModelParams
    opt: AdamState
    history: list[float]
    step: int = 0


@dataclass
class StepCounters:
    actor_samples: int = 0
    baseline_samples: int = 0


def draw_batch(handle: MLMHandle, pair: tasks.QAPair, config: TrainConfig, step: int,
               counters: StepCounters | None = None) -> SampledBatch:
    """Sample the step's actor CoTs and the single baseline CoT'."""
    n = config.samples_per_step
    seeds = [derive_seed(config.run_seed, "actor", step, i) for i in range(n)]
    q = list(pair.question_ids)
    cots = mlm.sample_cots(handle, handle.actor, q, seeds, config.temperature)
    base_cot = mlm.sample_baseline_cot(handle, q, derive_seed(config.run_seed, "baseline", step),
                                       config.temperature)
    if counters is not None:
        counters.actor_samples += len(cots)
        counters.baseline_samples += 1
    with torch.no_grad():
        b = float(nn.sequence_logprob(handle.baseline, mlm.markovian_context(handle, base_cot), pair.target_ids))
    return SampledBatch(q, list(pair.target_ids), cots, base_cot, b)


def train_step(handle: MLMHandle, state: TrainState, pair: tasks.QAPair, config: TrainConfig,
               standardize_fn: Callable[..., AdvantageBatch] | None = None) -> tuple[TrainState, dict]:
    """One optimisation step. A numeric failure leaves ``state`` untouched."""
    step = state.step
    counters = StepCounters()
    handle.actor = state.actor
    batch = draw_batch(handle, pair, config, step, counters)
    tp = state.actor.trainable()
    loss = loss_components(handle, tp, batch, config, state.history, standardize_fn=standardize_fn)
    metrics = {
        "step": step,
        "variant": config.variant,
        "mean_reward": float(np.mean(loss.rewards)),
        "baseline_b": batch.baseline_logprob,
        "mean_advantage": float(np.mean(loss.advantages)),
        "adv_std": float(np.std(loss.advantages)),
        "sigma": loss.stats.std if loss.stats else None,
        **loss.values(),
        "n_actor_samples": counters.actor_samples,
        "n_baseline_samples": counters.baseline_samples,
    }
    updated = any(loss.mask)
    new_actor, new_opt = state.actor, state.opt
    pre = post = 0.0
    aborted = False
    if updated:
        grads = nn.gradients(tp, loss.total)
        pre = grads.global_norm
        clipped = nn.clip_gradients(grads, config.grad_clip)
        post = clipped.global_norm
        try:
            if not math.isfinite(pre):
                raise NumericError("non-finite gradient norm")
            new_actor, new_opt = nn.optimizer_step(state.actor, clipped, state.opt, AdamHyper(lr=config.lr))
        except NumericError as exc:
            log.warning("step %d aborted: %s", step, exc)
            aborted, updated = True, False
            new_actor, new_opt = state.actor, state.opt
    metrics.update(grad_norm_preclip=pre, grad_norm_postclip=post, updated=updated, aborted=aborted)
    history = state.history + loss.rewards if config.variant in SINGLE_SAMPLE_VARIANTS else state.history
    handle.actor = new_actor
    return TrainState(new_actor, new_opt, history, step + 1), metrics


# ---------------------------------------------------------------------------
# evaluation


def evaluate_accuracy(handle: MLMHandle, params: ModelParams, pairs: Sequence[tasks.QAPair],
                      seed: int, markovian: bool = True, cot_temperature: float = 0.0,
                      cots: Sequence[Sequence[int]] | None = None) -> tuple[float, list[bool]]:
    """Exact-match accuracy with a temperature-0 answer.

    CoTs are decoded from ``params`` at ``cot_temperature`` (greedy by
    default, seeded per example otherwise) unless given. The Markovian protocol decodes the answer from
    the CoT alone; the Non-Markovian one also shows the question.
    """
    if cots is None:
        ctxs = [handle.cot_context(p.question_ids) for p in pairs]
        seeds = [derive_seed(seed, "eval-cot", i) for i in range(len(pairs))]
        cots = nn.sample_batch(params, ctxs, handle.cot_cap, cot_temperature, seeds, handle.stop_token)
    answer_ctx = []
    for p, c in zip(pairs, cots):
        answer_ctx.append(mlm.markovian_context(handle, c) if markovian else mlm.nonmarkovian_context(handle, p.question_ids, c))
    max_len = max(len(p.target_ids) for p in pairs) + 1
    preds = nn.sample_batch(params, answer_ctx, max_len, 0.0, [0] * len(pairs), stop_token=tasks.EOS)
    correct = [tasks.check_answer(pr, p.target_ids) for pr, p in zip(preds, pairs)]
    return float(np.mean(correct)), correct


def eval_pairs(source: tasks.TaskSource, config: TrainConfig, n: int | None = None) -> list[tasks.QAPair]:
    n = config.eval_size if n is None else n
    return [source.pair(derive_seed(config.run_seed, "eval-pair", i)) for i in range(n)]


# ---------------------------------------------------------------------------
# run directories

MANIFEST = "manifest.json"
METRICS = "metrics.jsonl"
BASE_CKPT = "base.ckpt"
FINAL_CKPT = "final.ckpt"
PARTIAL = "PARTIAL"


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_manifest(config: TrainConfig) -> dict:
    inputs = {}
    if config.task.corpus_path:
        inputs["task.corpus_path"] = file_digest(config.task.corpus_path)
    if config.init_checkpoint:
        inputs["init_checkpoint"] = file_digest(config.init_checkpoint)
    return {
        "config": config.to_flat(),
        "seeds": {"run_seed": config.run_seed, "pretrain_seed": config.pretrain_seed,
                  "model.init_seed": config.model.init_seed, "task.seed": config.task.seed},
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "inputs": inputs,
        "char_ops": "detokenize-perturb-retokenize",
        "tokenizer": tokenizer_stamp(),
    }


def tokenizer_stamp() -> dict:
    return {"vocab_size": tasks.VOCAB_SIZE, "alphabet_sha256": hashlib.sha256(tasks.ALPHABET.encode()).hexdigest()}


def write_manifest(path: str | Path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def build_base_params(config: TrainConfig, source: tasks.TaskSource) -> ModelParams:
    if config.init_checkpoint:
        params = nn.load_checkpoint(config.init_checkpoint).params
        if params.config.vocab_size != config.model.vocab_size:
            raise ConfigError("init_checkpoint: vocabulary differs from model.vocab_size")
        return params
    params = nn.init_params(config.model)
    if config.pretrain_steps > 0:
        docs = source.pretrain_docs(config.pretrain_docs, config.pretrain_seed, config.pretrain_copy_rate)
        params, _ = pretrain_lm(params, docs, config.pretrain_steps, config.pretrain_batch,
                                config.pretrain_lr, seed=config.pretrain_seed)
    return params


def make_handle(config: TrainConfig, base: ModelParams, source: tasks.TaskSource) -> MLMHandle:
    handle = MLMHandle.from_params(base, config.task.cot_cap, source.cot_init_ids(), stop_token=source.cot_stop_token(),
                                   answer_cue=source.answer_cue_ids())
    probe = source.pair(0)
    handle.check_budget(probe.question_ids, len(probe.target_ids))
    return handle


def _save_state(path: Path, state: TrainState, config: TrainConfig) -> None:
    extra = {}
    for name in state.actor.names():
        if name in state.opt.m:
            extra[f"m:{name}"] = state.opt.m[name]
            extra[f"v:{name}"] = state.opt.v[name]
    nn.save_checkpoint(path, state.actor, step=state.step, seed=config.run_seed, extra_arrays=extra,
                       extra_meta={"adam_step": state.opt.step,
                                   "history": [float(h).hex() for h in state.history],
                                   "variant": config.variant})


def load_state(path: str | Path) -> TrainState:
    ck = nn.load_checkpoint(path)
    m = {k[2:]: v for k, v in ck.extra_arrays.items() if k.startswith("m:")}
    v = {k[2:]: t for k, t in ck.extra_arrays.items() if k.startswith("v:")}
    hist = [float.fromhex(h) for h in ck.extra_meta.get("history", [])]
    return TrainState(ck.params, AdamState(ck.extra_meta.get("adam_step", 0), m, v), hist, ck.step)


def checkpoint_path(run_dir: Path, step: int) -> Path:
    return run_dir / "checkpoints" / f"step_{step:06d}.ckpt"


def list_checkpoints(run_dir: str | Path) -> list[tuple[int, Path]]:
    out = []
    for p in sorted((Path(run_dir) / "checkpoints").glob("step_*.ckpt")):
        out.append((int(p.stem.split("_")[1]), p))
    return out


def train(config: TrainConfig, run_dir: str | Path, resume: bool = False,
          stop_after: int | None = None) -> Path:
    """Run (or resume) a training run inside ``run_dir``.

    ``stop_after`` ends the loop early at that step count, as if the
    process had been interrupted; resuming later continues bit-identically.
    """
    run_dir = Path(run_dir)
    source = tasks.TaskSource(config.task)
    manifest = build_manifest(config)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "checkpoints").mkdir(exist_ok=True)
        if resume:
            old = read_manifest(run_dir / MANIFEST)
            if old["config"] != manifest["config"] or old["inputs"] != manifest["inputs"]:
                raise ConfigError("resume: manifest config or input digests differ from this run")
            base = nn.load_checkpoint(run_dir / BASE_CKPT).params
            done = [(s, p) for s, p in list_checkpoints(run_dir)]
            if not done:
                raise ConfigError("resume: no checkpoint to resume from")
            state = load_state(done[-1][1])
            _truncate_metrics(run_dir / METRICS, state.step)
        else:
            if (run_dir / MANIFEST).exists():
                raise ConfigError(f"{run_dir}: already holds a run; refusing to overwrite")
            write_manifest(run_dir / MANIFEST, manifest)
            base = build_base_params(config, source)
            nn.save_checkpoint(run_dir / BASE_CKPT, base, step=0, seed=config.pretrain_seed)
            state = TrainState(base.clone(), AdamState(), [], 0)
            _save_state(checkpoint_path(run_dir, 0), state, config)
            (run_dir / METRICS).write_text("")
        handle = make_handle(config, base, source)
        handle.actor = state.actor
        eval_set = eval_pairs(source, config) if config.eval_interval > 0 else []
        end = config.steps if stop_after is None else min(config.steps, stop_after)
        with open(run_dir / METRICS, "a") as mf:
            while state.step < end:
                pair = source.pair(derive_seed(config.run_seed, "pair", state.step))
                state, metrics = train_step(handle, state, pair, config)
                if config.eval_interval > 0 and state.step % config.eval_interval == 0:
                    acc, _ = evaluate_accuracy(handle, state.actor, eval_set,
                                               derive_seed(config.run_seed, "eval"),
                                               markovian=config.variant != "NonMarkovianGRPO")
                    metrics["accuracy"] = acc
                mf.write(json.dumps(metrics, sort_keys=True) + "\n")
                mf.flush()
                if state.step % config.checkpoint_interval == 0:
                    _save_state(checkpoint_path(run_dir, state.step), state, config)
        if state.step >= config.steps:
            _save_state(run_dir / FINAL_CKPT, state, config)
            if state.step % config.checkpoint_interval:
                _save_state(checkpoint_path(run_dir, state.step), state, config)
    except OSError:
        (run_dir / PARTIAL).write_text("run aborted by an I/O failure\n")
        raise
    return run_dir


@dataclass
class OpenRun:
    run_dir: Path
    manifest: dict
    config: TrainConfig
    source: tasks.TaskSource
    handle: MLMHandle


def open_run(run_dir: str | Path, checkpoint: str | Path | None = None) -> OpenRun:
    """Rebuild a finished run's handle; the actor is ``checkpoint`` or the final state."""
    run_dir = Path(run_dir)
    if not (run_dir / MANIFEST).exists():
        raise ConfigError(f"{run_dir}: no {MANIFEST}; not a run directory")
    manifest = read_manifest(run_dir / MANIFEST)
    config = TrainConfig.from_flat(manifest["config"])
    source = tasks.TaskSource(config.task)
    base = nn.load_checkpoint(run_dir / BASE_CKPT).params
    handle = make_handle(config, base, source)
    if checkpoint is None:
        checkpoint = run_dir / FINAL_CKPT
        if not checkpoint.exists():
            ck = list_checkpoints(run_dir)
            if not ck:
                raise ConfigError(f"{run_dir}: no checkpoints")
            checkpoint = ck[-1][1]
    handle.actor = load_state(checkpoint).actor
    return OpenRun(run_dir, manifest, config, source, handle)


def _truncate_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in keep))


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / METRICS
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln]

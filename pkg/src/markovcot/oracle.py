"""Exact enumeration of the informativeness objective on micro-instances.

For a task small enough to list every CoT, the objective

    J(theta) = mean_(q,a) [ sum_c u_theta(c | q) ln pi_theta(a | c)
                            - sum_c' u'(c' | q) ln pi'(a | c') ]

is computed exactly, differentiated directly, and compared with the
chain-rule split

    grad J = E[ R grad ln u_theta(c | q) ]  +  E[ grad R ]

and with Monte-Carlo estimators of it.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import mlm, nn
from .errors import ConfigError
from .mlm import MLMHandle
from .nn import GradientSet, ModelConfig, ModelParams
from .seeding import derive_seed
from .tasks import MicroTask, micro_oracle_task

MAX_COTS = 10_000
ESTIMATORS = ("raw", "baseline", "standardized")


def micro_config(task: MicroTask, d_model: int = 8, n_layers: int = 1, n_heads: int = 2,
                 d_ff: int = 16, init_seed: int = 0) -> ModelConfig:
    ctx = max(len(q) for q, _ in task.pairs) + len(task.cot_init) + task.cot_cap + 2
    return ModelConfig(vocab_size=task.vocab_size, context_len=ctx, d_model=d_model, n_layers=n_layers,
                       n_heads=n_heads, d_ff=d_ff, init_seed=init_seed, dtype="float64")


def jitter(params: ModelParams, scale: float, seed: int) -> ModelParams:
    """Add N(0, scale^2) noise to every tensor so the micro model is far from uniform."""
    g = torch.Generator().manual_seed(seed)
    out = params.clone()
    for name in out.names():
        t = out.tensors[name]
        out.tensors[name] = t + scale * torch.randn(t.shape, generator=g, dtype=t.dtype)
    return out


def micro_instance(task: MicroTask | None = None, seed: int = 0, actor_scale: float = 0.5,
                   stop_token: int | None = None) -> tuple[MLMHandle, MicroTask]:
    """A micro handle whose actor differs from its baseline and has nonzero grad R."""
    task = task or micro_oracle_task()
    cfg = micro_config(task, init_seed=seed)
    base = jitter(nn.init_params(cfg), actor_scale, derive_seed(seed, "baseline-jitter"))
    actor = jitter(base, actor_scale, derive_seed(seed, "actor-jitter"))
    handle = MLMHandle(actor, base, task.cot_cap, task.cot_init, stop_token)
    return handle, task


def enumerate_cots(vocab: int, cot_cap: int, stop_token: int | None = None) -> list[list[int]]:
    """Every CoT the sampler can emit (stop token excluded from the CoT itself)."""
    if stop_token is None:
        space = vocab**cot_cap
        if space > MAX_COTS:
            raise ConfigError(f"CoT space {space} exceeds the enumeration limit {MAX_COTS}")
        return [list(c) for c in itertools.product(range(vocab), repeat=cot_cap)]
    tokens = [t for t in range(vocab) if t != stop_token]
    out = []
    for n in range(cot_cap + 1):
        out.extend(list(c) for c in itertools.product(tokens, repeat=n))
        if len(out) > MAX_COTS:
            raise ConfigError(f"CoT space exceeds the enumeration limit {MAX_COTS}")
    return out


@dataclass
class CotRow:
    question: list[int]
    answer: list[int]
    cot: list[int]
    prob: float
    baseline_prob: float
    answer_logprob: float
    baseline_answer_logprob: float


def _tables(handle: MLMHandle, params: ModelParams, task: MicroTask):
    """Per pair: CoT list, ln u_theta, ln pi_theta(a|c), and the baseline analogues."""
    cots = enumerate_cots(task.vocab_size, handle.cot_cap, handle.stop_token)
    out = []
    for q, a in task.pairs:
        lu = mlm.cot_logprob_batch(handle, params, [q] * len(cots), cots)
        lpi = mlm.answer_logprob_batch(handle, params, cots, a)
        with torch.no_grad():
            lu_b = mlm.cot_logprob_batch(handle, handle.baseline, [q] * len(cots), cots)
            lpi_b = mlm.answer_logprob_batch(handle, handle.baseline, cots, a)
        out.append((list(q), list(a), cots, lu, lpi, lu_b, lpi_b))
    return out


def baseline_terms(handle: MLMHandle, task: MicroTask) -> list[float]:
    """``E_{c' ~ u'}[ln pi'(a | c')]`` per pair; constant in theta."""
    return [float((lu_b.exp() * lpi_b).sum()) for *_, lu_b, lpi_b in _tables(handle, handle.baseline, task)]


def exact_objective(handle: MLMHandle, task: MicroTask, params: ModelParams | None = None) -> torch.Tensor:
    """Differentiable J(theta) by full enumeration."""
    params = handle.actor if params is None else params
    total = torch.zeros((), dtype=params.config.torch_dtype)
    for _, _, _, lu, lpi, lu_b, lpi_b in _tables(handle, params, task):
        total = total + (lu.exp() * lpi).sum() - (lu_b.exp() * lpi_b).sum()
    return total / len(task.pairs)


@dataclass
class ExactGradient:
    objective: float
    direct: GradientSet
    reinforce: GradientSet
    reward_grad: GradientSet
    prob_sums: list[float]
    rows: list[CotRow] = field(default_factory=list)

    @property
    def two_term(self) -> dict[str, torch.Tensor]:
        return {k: self.reinforce.grads[k] + self.reward_grad.grads[k] for k in self.direct.grads}

    def max_identity_gap(self) -> float:
        tt = self.two_term
        return max(float((tt[k] - self.direct.grads[k]).abs().max()) for k in tt)


def exact_gradient(handle: MLMHandle, task: MicroTask) -> ExactGradient:
    """Direct gradient of J and its REINFORCE / reward-gradient split."""
    tp = handle.actor.trainable()
    tables = _tables(handle, tp, task)
    n = len(task.pairs)
    j = torch.zeros((), dtype=tp.config.torch_dtype)
    reinforce = torch.zeros_like(j)
    reward = torch.zeros_like(j)
    sums, rows = [], []
    for q, a, cots, lu, lpi, lu_b, lpi_b in tables:
        b = (lu_b.exp() * lpi_b).sum()
        j = j + (lu.exp() * lpi).sum() - b
        r_det = lpi.detach() - b
        p_det = lu.exp().detach()
        # sum_c R(c) grad u(c) = E[R grad ln u]; sum_c u(c) grad R(c) = E[grad R]
        reinforce = reinforce + (r_det * lu.exp()).sum()
        reward = reward + (p_det * lpi).sum()
        sums.append(float(lu.detach().exp().sum()))
        for c, pu, pb, x, y in zip(cots, lu.detach().exp().tolist(), lu_b.exp().tolist(),
                                     lpi.detach().tolist(), lpi_b.tolist()):
            rows.append(CotRow(q, a, c, pu, pb, x, y))
    j, reinforce, reward = j / n, reinforce / n, reward / n
    grads = [nn.gradients(tp, x, retain_graph=True) for x in (j, reinforce, reward)]
    return ExactGradient(float(j.detach()), *grads, sums, rows)


# ---------------------------------------------------------------------------
# Monte-Carlo estimators


@dataclass
class MCEstimate:
    estimator: str
    with_reward_grad: bool
    n_samples: int
    mean: dict[str, torch.Tensor]
    stderr: dict[str, torch.Tensor]

    def z_scores(self, exact: dict[str, torch.Tensor], degenerate_tol: float = 1e-9) -> dict[str, torch.Tensor]:
        """``(mean - exact) / stderr``; zero-variance coordinates give 0 or inf."""
        out = {}
        for k, m in self.mean.items():
            diff = m - exact[k]
            se = self.stderr[k]
            z = torch.where(se > 1e-12, diff / se.clamp_min(1e-300), torch.zeros_like(diff))
            bad = (se <= 1e-12) & (diff.abs() > degenerate_tol)
            out[k] = torch.where(bad, torch.full_like(diff, math.inf), z)
        return out

    def max_abs_z(self, exact: dict[str, torch.Tensor]) -> float:
        return max(float(z.abs().max()) for z in self.z_scores(exact).values())


def _flat(grads: GradientSet, names: Sequence[str]) -> np.ndarray:
    return np.concatenate([grads.grads[n].detach().reshape(-1).numpy() for n in names])


def _unflat(vec: np.ndarray, params: ModelParams) -> dict[str, torch.Tensor]:
    out, i = {}, 0
    for n in params.names():
        t = params.tensors[n]
        out[n] = torch.as_tensor(vec[i : i + t.numel()].reshape(t.shape))
        i += t.numel()
    return out


def _per_cot_grads(handle: MLMHandle, task: MicroTask):
    """grad ln u(c|q) and grad ln pi(a|c) for every distinct (pair, CoT)."""
    tp = handle.actor.trainable()
    names = tp.names()
    cots = enumerate_cots(task.vocab_size, handle.cot_cap, handle.stop_token)
    g_u, g_pi, r = [], [], []
    for q, a in task.pairs:
        lu = mlm.cot_logprob_batch(handle, tp, [q] * len(cots), cots)
        lpi = mlm.answer_logprob_batch(handle, tp, cots, a)
        gu_rows, gp_rows = [], []
        for i in range(len(cots)):
            gu_rows.append(_flat(nn.gradients(tp, lu[i], retain_graph=True), names))
            gp_rows.append(_flat(nn.gradients(tp, lpi[i], retain_graph=True), names))
        g_u.append(np.stack(gu_rows))
        g_pi.append(np.stack(gp_rows))
        r.append(lpi.detach().numpy())
    return cots, g_u, g_pi, r


def _sample_indices(handle: MLMHandle, params: ModelParams, q: Sequence[int], n: int, seed: int,
                    index: dict[tuple[int, ...], int]) -> np.ndarray:
    seeds = [derive_seed(seed, i) for i in range(n)]
    cots = mlm.sample_cots(handle, params, q, seeds)
    return np.array([index[tuple(c)] for c in cots], dtype=np.int64)


def mc_gradient_estimates(handle: MLMHandle, task: MicroTask, n_samples: int, seed: int = 0,
                          estimators: Sequence[str] = ESTIMATORS, group_size: int = 8,
                          eps: float = 1e-6) -> list[MCEstimate]:
    """Monte-Carlo gradient means and standard errors for every estimator.

    Episodes draw a pair uniformly, a CoT from the actor's own sampler and
    a baseline CoT' from the baseline's. Per-episode gradients are
    ``coef * grad ln u(c|q)`` plus, when enabled, ``grad ln pi(a|c)``.
    Coefficients: ``raw`` uses r = ln pi(a|c); ``baseline`` uses
    R = r - ln pi'(a|c'); ``standardized`` groups ``group_size`` episodes
    of the same pair and uses (R - mu) / (sigma + eps), where the reward
    gradient term becomes grad r / (sigma + eps).
    """
    for e in estimators:
        if e not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {e!r}")
    cots, g_u, g_pi, r = _per_cot_grads(handle, task)
    index = {tuple(c): i for i, c in enumerate(cots)}
    n_pairs = len(task.pairs)
    rng = np.random.default_rng(derive_seed(seed, "pairs"))
    n_groups = -(-n_samples // group_size)
    pair_of_group = rng.integers(n_pairs, size=n_groups)
    pair_idx = np.repeat(pair_of_group, group_size)[:n_samples]
    actor_idx = np.empty(n_samples, dtype=np.int64)
    base_idx = np.empty(n_samples, dtype=np.int64)
    base_r = []
    for p, (q, a) in enumerate(task.pairs):
        sel = np.flatnonzero(pair_idx == p)
        actor_idx[sel] = _sample_indices(handle, handle.actor, q, len(sel), derive_seed(seed, "actor", p), index)
        base_idx[sel] = _sample_indices(handle, handle.baseline, q, len(sel), derive_seed(seed, "base", p), index)
        with torch.no_grad():
            base_r.append(mlm.answer_logprob_batch(handle, handle.baseline, cots, a).numpy())
    r_s = np.array([r[p][c] for p, c in zip(pair_idx, actor_idx)])
    b_s = np.array([base_r[p][c] for p, c in zip(pair_idx, base_idx)])
    out = []
    for est in estimators:
        for with_ar in (True, False):
            if est == "raw":
                coef, ar_scale = r_s, np.ones(n_samples)
            elif est == "baseline":
                coef, ar_scale = r_s - b_s, np.ones(n_samples)
            else:
                big = r_s - b_s
                coef = np.empty(n_samples)
                ar_scale = np.empty(n_samples)
                for g in range(n_groups):
                    sl = slice(g * group_size, min((g + 1) * group_size, n_samples))
                    mu, sigma = big[sl].mean(), big[sl].std()
                    coef[sl] = (big[sl] - mu) / (sigma + eps)
                    ar_scale[sl] = 1.0 / (sigma + eps) if sigma > 0 else 0.0
            mean, se = _moments(coef, ar_scale if with_ar else None, pair_idx, actor_idx, g_u, g_pi,
                                group_size if est == "standardized" else 1)
            out.append(MCEstimate(est, with_ar, n_samples, _unflat(mean, handle.actor), _unflat(se, handle.actor)))
    return out


def _moments(coef, ar_scale, pair_idx, cot_idx, g_u, g_pi, block: int):
    """Mean and standard error of per-episode (or per-group) gradient vectors."""
    n = len(coef)
    dim = g_u[0].shape[1]
    # per-episode gradient = coef * g_u[p][c] + ar_scale * g_pi[p][c]; accumulate
    # by distinct (p, c) where possible to avoid an n x dim matrix
    if block == 1:
        s1 = np.zeros(dim)
        s2 = np.zeros(dim)
        keys = pair_idx * 10**6 + cot_idx
        for key in np.unique(keys):
            sel = keys == key
            p, c = int(key // 10**6), int(key % 10**6)
            a = coef[sel]
            gu, gp = g_u[p][c], g_pi[p][c]
            if ar_scale is None:
                s1 += a.sum() * gu
                s2 += (a * a).sum() * gu * gu
            else:
                w = ar_scale[sel]
                s1 += a.sum() * gu + w.sum() * gp
                s2 += (a * a).sum() * gu * gu + 2 * (a * w).sum() * gu * gp + (w * w).sum() * gp * gp
        mean = s1 / n
        var = np.maximum(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
        return mean, np.sqrt(var / n)
    # standardized: the group mean of gradients is the unit of independence
    groups = -(-n // block)
    vecs = np.zeros((groups, dim))
    for i in range(n):
        p, c = pair_idx[i], cot_idx[i]
        v = coef[i] * g_u[p][c]
        if ar_scale is not None:
            v = v + ar_scale[i] * g_pi[p][c]
        vecs[i // block] += v
    sizes = np.bincount(np.arange(n) // block, minlength=groups)
    vecs /= sizes[:, None]
    mean = vecs.mean(0)
    se = vecs.std(0, ddof=1) / math.sqrt(groups) if groups > 1 else np.zeros(dim)
    return mean, se


# ---------------------------------------------------------------------------
# report


@dataclass
class OracleReport:
    objective: float
    prob_sums: list[float]
    identity_gap: float
    fd_max_rel_error: float
    estimators: list[dict]
    rows: list[CotRow]
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_json(self) -> str:
        d = {
            "objective": self.objective,
            "prob_sums": self.prob_sums,
            "identity_gap": self.identity_gap,
            "fd_max_rel_error": self.fd_max_rel_error,
            "estimators": self.estimators,
            "checks": self.checks,
            "passed": self.passed,
            "cot_table": [vars(r) for r in self.rows],
        }
        return json.dumps(d, indent=2, sort_keys=True)


def oracle_report(handle: MLMHandle, task: MicroTask, n_samples: int = 100_000, seed: int = 0,
                  fd_probes: int = 50, z_limit: float = 3.0) -> OracleReport:
    """Run every oracle check on one micro-instance."""
    ex = exact_gradient(handle, task)
    fd = nn.finite_difference_check(handle.actor, lambda p: exact_objective(handle, task, p),
                                    probes=fd_probes, h=1e-4, seed=seed)
    direct = ex.direct.grads
    ests = mc_gradient_estimates(handle, task, n_samples, seed)
    summary = []
    for e in ests:
        summary.append({"estimator": e.estimator, "with_reward_grad": e.with_reward_grad,
                        "n_samples": e.n_samples, "max_abs_z": e.max_abs_z(direct)})
    by = {(e.estimator, e.with_reward_grad): e for e in ests}
    checks = {
        "probabilities_sum_to_one": all(abs(s - 1.0) <= 1e-9 for s in ex.prob_sums),
        "two_term_identity": ex.max_identity_gap() <= 1e-9,
        "finite_difference": fd.passed(1e-6),
        "mc_with_reward_grad_unbiased": by[("raw", True)].max_abs_z(direct) <= z_limit,
        "mc_without_reward_grad_biased": by[("raw", False)].max_abs_z(direct) > z_limit,
    }
    return OracleReport(ex.objective, ex.prob_sums, ex.max_identity_gap(), fd.max_rel_error, summary,
                        ex.rows, checks)


def write_report(report: OracleReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json() + "\n")

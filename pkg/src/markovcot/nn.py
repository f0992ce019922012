"""Tiny decoder-only language model with reverse-mode gradients.

The network is a pre-norm causal transformer with learned positional
embeddings and a weight-tied output head. Parameters live in a plain
ordered mapping of tensors (``ModelParams``) and every operation here is a
pure function of its inputs, so the same code serves the trainable actor,
the frozen baseline and the critics.

A beginning-of-sequence embedding is prepended internally to every input.
It has its own embedding row but no output logit, which lets the model
score a continuation given an empty context (e.g. a fully deleted CoT).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, LengthError, NumericError

DTYPES = {"float64": torch.float64, "float32": torch.float32}

TokenSeq = Sequence[int]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    context_len: int = 256
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("vocab_size", "context_len", "d_model", "n_layers", "n_heads", "d_ff"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model.{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        if self.dtype not in DTYPES:
            raise ConfigError(f"model.dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """All weight arrays of one network, keyed as ``<block>.<role>``."""

    config: ModelConfig
    tensors: dict[str, torch.Tensor]

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def detached(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach() for k, v in self.tensors.items()})

    def trainable(self) -> "ModelParams":
        """Fresh leaf tensors that record gradients."""
        return ModelParams(
            self.config,
            {k: v.detach().clone().requires_grad_(True) for k, v in self.tensors.items()},
        )

    def num_params(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def flat(self) -> torch.Tensor:
        return torch.cat([v.detach().reshape(-1) for v in self.tensors.values()])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, v in self.tensors.items():
            h.update(name.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.tensors.values())


@dataclass
class GradientSet:
    grads: dict[str, torch.Tensor]
    global_norm: float = field(default=float("nan"))

    def __post_init__(self):
        if math.isnan(self.global_norm):
            self.global_norm = global_norm(self.grads)


def global_norm(grads: dict[str, torch.Tensor]) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g.double() ** 2).sum())
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# initialisation


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size + 1, d),  # last row is the BOS embedding
        "pos_emb": (cfg.context_len + 1, d),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}"
        shapes.update(
            {
                f"{p}.ln1.w": (d,),
                f"{p}.ln1.b": (d,),
                f"{p}.attn.w_qkv": (d, 3 * d),
                f"{p}.attn.b_qkv": (3 * d,),
                f"{p}.attn.w_out": (d, d),
                f"{p}.attn.b_out": (d,),
                f"{p}.ln2.w": (d,),
                f"{p}.ln2.b": (d,),
                f"{p}.mlp.w_in": (d, f),
                f"{p}.mlp.b_in": (f,),
                f"{p}.mlp.w_out": (f, d),
                f"{p}.mlp.b_out": (d,),
            }
        )
    shapes["ln_f.w"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, *, zero: bool = False) -> ModelParams:
    """Seeded initialisation; ``zero=True`` gives the uniform-logit model."""
    gen = torch.Generator().manual_seed(int(cfg.init_seed) % (2**63))
    dt = cfg.torch_dtype
    out: dict[str, torch.Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        role = name.rsplit(".", 1)[-1]
        if zero:
            t = torch.zeros(shape, dtype=dt)
        elif role == "w" and ("ln" in name):
            t = torch.ones(shape, dtype=dt)
        elif role.startswith("b"):
            t = torch.zeros(shape, dtype=dt)
        else:
            std = 0.02
            if role == "w_out":
                std = 0.02 / math.sqrt(2 * cfg.n_layers)
            t = torch.randn(shape, generator=gen, dtype=torch.float64).to(dt) * std
        out[name] = t
    return ModelParams(cfg, out)


# ---------------------------------------------------------------------------
# forward pass


def _check_len(cfg: ModelConfig, n: int) -> None:
    if n > cfg.context_len:
        raise LengthError(f"sequence of {n} tokens exceeds context_len {cfg.context_len}")


def _check_ids(cfg: ModelConfig, ids: TokenSeq) -> None:
    for t in ids:
        if not 0 <= int(t) < cfg.vocab_size:
            raise ContractError(f"token id {t} outside [0, {cfg.vocab_size})")


def _layer_norm(x, w, b):
    return F.layer_norm(x, (x.shape[-1],), w, b, eps=1e-5)


def _forward_internal(params: ModelParams, ids: torch.Tensor) -> torch.Tensor:
    """Logits for ``[BOS] + ids`` over a right-padded batch ``[B, T]``.

    Output index ``k`` is the next-token prediction after reading the BOS
    and the first ``k`` user tokens.
    """
    cfg = params.config
    p = params.tensors
    bsz, t = ids.shape
    bos = torch.full((bsz, 1), cfg.vocab_size, dtype=torch.long)
    full = torch.cat([bos, ids], dim=1)
    n = t + 1
    x = p["tok_emb"][full] + p["pos_emb"][:n]
    nh = cfg.n_heads
    hd = cfg.d_model // nh
    mask = torch.ones(n, n, dtype=torch.bool).tril()
    for i in range(cfg.n_layers):
        pre = f"h{i}"
        h = _layer_norm(x, p[f"{pre}.ln1.w"], p[f"{pre}.ln1.b"])
        qkv = h @ p[f"{pre}.attn.w_qkv"] + p[f"{pre}.attn.b_qkv"]
        q, k, v = qkv.split(cfg.d_model, dim=-1)
        q = q.view(bsz, n, nh, hd).transpose(1, 2)
        k = k.view(bsz, n, nh, hd).transpose(1, 2)
        v = v.view(bsz, n, nh, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(bsz, n, cfg.d_model)
        x = x + y @ p[f"{pre}.attn.w_out"] + p[f"{pre}.attn.b_out"]
        h = _layer_norm(x, p[f"{pre}.ln2.w"], p[f"{pre}.ln2.b"])
        h = F.gelu(h @ p[f"{pre}.mlp.w_in"] + p[f"{pre}.mlp.b_in"])
        x = x + h @ p[f"{pre}.mlp.w_out"] + p[f"{pre}.mlp.b_out"]
        if not bool(torch.isfinite(x).all()):
            raise NumericError(f"non-finite activation in layer {i}", layer=i)
    x = _layer_norm(x, p["ln_f.w"], p["ln_f.b"])
    logits = x @ p["tok_emb"][: cfg.vocab_size].T
    if not bool(torch.isfinite(logits).all()):
        raise NumericError("non-finite logits in output head", layer=cfg.n_layers)
    return logits


def _pad(rows: Sequence[TokenSeq], min_len: int = 0) -> torch.Tensor:
    width = max([len(r) for r in rows] + [min_len])
    out = torch.zeros((len(rows), width), dtype=torch.long)
    for i, r in enumerate(rows):
        if len(r):
            out[i, : len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    return out


def forward_logits(params: ModelParams, tokens: TokenSeq) -> torch.Tensor:
    """One logit vector per input position; row ``i`` predicts token ``i+1``."""
    n = len(tokens)
    if n < 1:
        raise LengthError("forward_logits needs at least one token")
    _check_len(params.config, n)
    _check_ids(params.config, tokens)
    logits = _forward_internal(params, _pad([tokens]))
    return logits[0, 1:]


def next_token_dist(params: ModelParams, context: TokenSeq) -> torch.Tensor:
    _check_len(params.config, len(context) + 1)
    _check_ids(params.config, context)
    logits = _forward_internal(params, _pad([context]))
    return torch.softmax(logits[0, len(context)], dim=-1)


def _score_rows(params: ModelParams, contexts, continuations):
    """Per-row (log-probs of continuation tokens, log-softmax rows used)."""
    cfg = params.config
    rows = []
    for ctx, cont in zip(contexts, continuations):
        _check_len(cfg, len(ctx) + len(cont))
        _check_ids(cfg, ctx)
        _check_ids(cfg, cont)
        # the final token never needs to be read to score the sequence
        rows.append(list(ctx) + list(cont)[:-1] if len(cont) else list(ctx))
    ids = _pad(rows, min_len=1)
    return torch.log_softmax(_forward_internal(params, ids), dim=-1)


def sequence_logprob_batch(
    params: ModelParams, contexts: Sequence[TokenSeq], continuations: Sequence[TokenSeq]
) -> torch.Tensor:
    """Differentiable ``sum_i ln p(cont_i | ctx, cont_<i)`` for each row."""
    if len(contexts) != len(continuations):
        raise ContractError("contexts and continuations differ in length")
    for cont in continuations:
        if len(cont) < 1:
            raise ContractError("continuation must be nonempty")
    logp = _score_rows(params, contexts, continuations)
    bidx, pidx, tidx = [], [], []
    for r, (ctx, cont) in enumerate(zip(contexts, continuations)):
        for j, tok in enumerate(cont):
            bidx.append(r)
            pidx.append(len(ctx) + j)
            tidx.append(int(tok))
    picked = logp[bidx, pidx, tidx]
    owner = torch.as_tensor(bidx, dtype=torch.long)
    out = torch.zeros(len(contexts), dtype=logp.dtype)
    return out.index_add(0, owner, picked)


def sequence_logprob(params: ModelParams, context: TokenSeq, continuation: TokenSeq) -> torch.Tensor:
    """Scalar tensor (nats); call ``float()`` for a plain number."""
    return sequence_logprob_batch(params, [context], [continuation])[0]


def logprob_and_kl_batch(
    params_a: ModelParams,
    params_b: ModelParams | None,
    contexts: Sequence[TokenSeq],
    continuations: Sequence[TokenSeq],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-row continuation log-prob under ``a`` and summed KL(a || b).

    The KL is taken between the full next-token distributions at every
    position that predicts a continuation token; ``b`` is a constant. Rows
    with an empty continuation get zeros. ``params_b=None`` skips the KL.
    """
    dt = params_a.config.torch_dtype
    lp_out = torch.zeros(len(continuations), dtype=dt)
    kl_out = torch.zeros(len(continuations), dtype=dt)
    keep = [i for i, c in enumerate(continuations) if len(c)]
    if not keep:
        return lp_out, kl_out
    ctxs = [contexts[i] for i in keep]
    cs = [continuations[i] for i in keep]
    la = _score_rows(params_a, ctxs, cs)
    bidx, pidx, tidx = [], [], []
    for r, (ctx, cont) in enumerate(zip(ctxs, cs)):
        for j, tok in enumerate(cont):
            bidx.append(r)
            pidx.append(len(ctx) + j)
            tidx.append(int(tok))
    owner = torch.as_tensor(bidx, dtype=torch.long)
    rows = torch.as_tensor(keep, dtype=torch.long)
    lp = torch.zeros(len(cs), dtype=la.dtype).index_add(0, owner, la[bidx, pidx, tidx])
    lp_out = lp_out.index_copy(0, rows, lp)
    if params_b is not None:
        with torch.no_grad():
            lb = _score_rows(params_b.detached(), ctxs, cs)
        lpa = la[bidx, pidx]
        lpb = lb[bidx, pidx].to(lpa.dtype)
        per_pos = (lpa.exp() * (lpa - lpb)).sum(-1)
        kl = torch.zeros(len(cs), dtype=lpa.dtype).index_add(0, owner, per_pos)
        kl_out = kl_out.index_copy(0, rows, kl)
    return lp_out, kl_out


def kl_cot_batch(
    params_a: ModelParams,
    params_b: ModelParams,
    contexts: Sequence[TokenSeq],
    cots: Sequence[TokenSeq],
) -> torch.Tensor:
    """Summed per-position KL(a || b) along each sampled CoT; b is constant."""
    return logprob_and_kl_batch(params_a, params_b, contexts, cots)[1]


def kl_cot(params_a: ModelParams, params_b: ModelParams, context: TokenSeq, cot: TokenSeq) -> torch.Tensor:
    return kl_cot_batch(params_a, params_b, [context], [cot])[0]


# ---------------------------------------------------------------------------
# sampling


def _block_step(params: ModelParams, x: torch.Tensor, cache: list, start: int) -> torch.Tensor:
    """Run new positions ``x`` [B, t, d] through all layers, extending ``cache``."""
    cfg = params.config
    p = params.tensors
    bsz, t, _ = x.shape
    nh = cfg.n_heads
    hd = cfg.d_model // nh
    for i in range(cfg.n_layers):
        pre = f"h{i}"
        h = _layer_norm(x, p[f"{pre}.ln1.w"], p[f"{pre}.ln1.b"])
        qkv = h @ p[f"{pre}.attn.w_qkv"] + p[f"{pre}.attn.b_qkv"]
        q, k, v = qkv.split(cfg.d_model, dim=-1)
        q = q.view(bsz, t, nh, hd).transpose(1, 2)
        k = k.view(bsz, t, nh, hd).transpose(1, 2)
        v = v.view(bsz, t, nh, hd).transpose(1, 2)
        if len(cache) > i:
            k = torch.cat([cache[i][0], k], dim=2)
            v = torch.cat([cache[i][1], v], dim=2)
            cache[i] = (k, v)
        else:
            cache.append((k, v))
        total = k.shape[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        qpos = torch.arange(start, start + t).unsqueeze(1)
        mask = torch.arange(total).unsqueeze(0) <= qpos
        att = att.masked_fill(~mask, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(bsz, t, cfg.d_model)
        x = x + y @ p[f"{pre}.attn.w_out"] + p[f"{pre}.attn.b_out"]
        h = _layer_norm(x, p[f"{pre}.ln2.w"], p[f"{pre}.ln2.b"])
        h = F.gelu(h @ p[f"{pre}.mlp.w_in"] + p[f"{pre}.mlp.b_in"])
        x = x + h @ p[f"{pre}.mlp.w_out"] + p[f"{pre}.mlp.b_out"]
        if not bool(torch.isfinite(x).all()):
            raise NumericError(f"non-finite activation in layer {i}", layer=i)
    x = _layer_norm(x, p["ln_f.w"], p["ln_f.b"])
    return x @ p["tok_emb"][: cfg.vocab_size].T


def _draw(last: torch.Tensor, temperature: float, rngs: list, vocab: int) -> list[int]:
    last = last.double()
    if temperature == 0:
        return torch.argmax(last, dim=-1).tolist()
    probs = torch.softmax(last / temperature, dim=-1)
    cdf = torch.cumsum(probs, dim=-1).numpy()
    picks = []
    for r, rng in enumerate(rngs):
        u = rng.random()
        k = int(np.searchsorted(cdf[r], u * cdf[r, -1], side="right"))
        picks.append(min(k, vocab - 1))
    return picks


def _sample_group(params, ctx, n_rows, max_len, temperature, rngs, stop_token):
    """Cached decoding for ``n_rows`` rows sharing one context."""
    cfg = params.config
    p = params.tensors
    full = torch.as_tensor([cfg.vocab_size] + list(ctx), dtype=torch.long).unsqueeze(0)
    cache: list = []
    x = p["tok_emb"][full] + p["pos_emb"][: full.shape[1]]
    logits = _block_step(params, x, cache, 0)[:, -1]
    cache = [(k.expand(n_rows, -1, -1, -1), v.expand(n_rows, -1, -1, -1)) for k, v in cache]
    logits = logits.expand(n_rows, -1)
    outs = [[] for _ in range(n_rows)]
    done = [False] * n_rows
    pos = full.shape[1]
    for step in range(max_len):
        picks = _draw(logits, temperature, rngs, cfg.vocab_size)
        for r, tok in enumerate(picks):
            if done[r]:
                continue
            if stop_token is not None and tok == stop_token:
                done[r] = True
            else:
                outs[r].append(int(tok))
        if all(done) or step == max_len - 1:
            break
        tok_ids = torch.as_tensor(picks, dtype=torch.long).unsqueeze(1)
        x = p["tok_emb"][tok_ids] + p["pos_emb"][pos : pos + 1]
        logits = _block_step(params, x, cache, pos)[:, -1]
        pos += 1
    return outs


def sample_batch(
    params: ModelParams,
    contexts: Sequence[TokenSeq],
    max_len: int,
    temperature: float,
    seeds: Sequence[int],
    stop_token: int | None = None,
) -> list[list[int]]:
    """Autoregressive sampling, one independent RNG stream per row.

    Each row draws one uniform per generated token from
    ``np.random.default_rng(seed)`` and inverts the tempered CDF, so a row's
    tokens are determined by its own context and seed. Rows with identical
    contexts share one cached prefill. Temperature 0 is argmax decoding.
    """
    if len(seeds) != len(contexts):
        raise ContractError("need one seed per context")
    if temperature < 0:
        raise ContractError("temperature must be nonnegative")
    cfg = params.config
    for ctx in contexts:
        _check_len(cfg, len(ctx) + max_len)
        _check_ids(cfg, ctx)
    outs: list[list[int]] = [[] for _ in contexts]
    if max_len == 0 or not contexts:
        return outs
    groups: dict[tuple, list[int]] = {}
    for i, ctx in enumerate(contexts):
        groups.setdefault(tuple(int(t) for t in ctx), []).append(i)
    frozen = params.detached()
    with torch.no_grad():
        for ctx, rows in groups.items():
            rngs = [np.random.default_rng(int(seeds[i]) % (2**64)) for i in rows]
            res = _sample_group(frozen, ctx, len(rows), max_len, temperature, rngs, stop_token)
            for i, o in zip(rows, res):
                outs[i] = o
    return outs


def sample_continuation(
    params: ModelParams,
    context: TokenSeq,
    max_len: int,
    temperature: float,
    seed: int,
    stop_token: int | None = None,
) -> list[int]:
    return sample_batch(params, [context], max_len, temperature, [seed], stop_token)[0]


# ---------------------------------------------------------------------------
# gradients and optimisation


def gradients(params: ModelParams, loss: torch.Tensor, retain_graph: bool = False) -> GradientSet:
    """Reverse-mode gradient of a scalar loss built from ``params.trainable()``."""
    names = params.names()
    ts = [params.tensors[n] for n in names]
    gs = torch.autograd.grad(loss, ts, allow_unused=True, retain_graph=retain_graph)
    grads = {n: (torch.zeros_like(t) if g is None else g.detach()) for n, t, g in zip(names, ts, gs)}
    return GradientSet(grads)


def clip_gradients(grads: GradientSet, max_norm: float = 1.0) -> GradientSet:
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = grads.global_norm
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return GradientSet({k: g * scale for k, g in grads.grads.items()})


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def clone(self) -> "AdamState":
        return AdamState(
            self.step,
            {k: t.clone() for k, t in self.m.items()},
            {k: t.clone() for k, t in self.v.items()},
        )


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def optimizer_step(
    params: ModelParams, grads: GradientSet, state: AdamState, hyper: AdamHyper = AdamHyper()
) -> tuple[ModelParams, AdamState]:
    """One Adam step. Returns new params and state; inputs are not mutated."""
    t = state.step + 1
    new_m, new_v, new_p = {}, {}, {}
    b1c = 1 - hyper.beta1**t
    b2c = 1 - hyper.beta2**t
    for name, w in params.tensors.items():
        g = grads.grads[name].to(w.dtype)
        if g.shape != w.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m = state.m.get(name, torch.zeros_like(w))
        v = state.v.get(name, torch.zeros_like(w))
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * g * g
        upd = hyper.lr * (m / b1c) / ((v / b2c).sqrt() + hyper.eps)
        nw = w.detach() - upd
        if not bool(torch.isfinite(nw).all()):
            raise NumericError(f"non-finite update for {name}; step aborted")
        new_m[name], new_v[name], new_p[name] = m, v, nw
    return ModelParams(params.config, new_p), AdamState(t, new_m, new_v)


@dataclass
class FDReport:
    max_rel_error: float
    n_probes: int
    worst: tuple[str, tuple[int, ...]] | None
    rows: list[tuple[str, tuple[int, ...], float, float, float]]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def finite_difference_check(
    params: ModelParams,
    loss_fn: Callable[[ModelParams], torch.Tensor],
    probes: int = 50,
    h: float = 1e-5,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> FDReport:
    """Compare autograd against central differences on random coordinates.

    ``loss_fn`` must be deterministic. Coordinates where both gradients are
    below ``abs_floor`` are scored by absolute error instead.
    """
    base = params.trainable()
    analytic = gradients(base, loss_fn(base)).grads
    names = params.names()
    sizes = np.array([params.tensors[n].numel() for n in names], dtype=np.float64)
    rng = np.random.default_rng(seed)
    rows = []
    worst_err, worst = 0.0, None
    for _ in range(probes):
        ni = int(rng.choice(len(names), p=sizes / sizes.sum()))
        name = names[ni]
        flat_idx = int(rng.integers(params.tensors[name].numel()))
        idx = tuple(int(i) for i in np.unravel_index(flat_idx, params.tensors[name].shape))

        def shifted(delta):
            p = params.clone()
            p.tensors[name][idx] += delta
            with torch.no_grad():
                return float(loss_fn(p))

        numeric = (shifted(h) - shifted(-h)) / (2 * h)
        a = float(analytic[name][idx])
        scale = max(abs(a), abs(numeric))
        err = abs(a - numeric) / scale if scale > abs_floor else abs(a - numeric)
        rows.append((name, idx, a, numeric, err))
        if err >= worst_err:
            worst_err, worst = err, (name, idx)
    return FDReport(worst_err, probes, worst, rows)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "MARKOVCOT-CHECKPOINT 1"


def _header_lines(meta: dict) -> list[str]:
    return [f"{k} = {json.dumps(v, sort_keys=True)}" for k, v in meta.items()]


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    *,
    step: int = 0,
    seed: int | None = None,
    extra_arrays: dict[str, torch.Tensor] | None = None,
    extra_meta: dict | None = None,
) -> None:
    """Text header of ``key = <json>`` lines, then little-endian float arrays."""
    arrays = dict(params.tensors)
    extra_arrays = extra_arrays or {}
    layout = []
    for name, t in list(arrays.items()) + [(f"extra:{k}", v) for k, v in extra_arrays.items()]:
        layout.append([name, list(t.shape)])
    meta = {
        "config": params.config.to_dict(),
        "seed": seed if seed is not None else params.config.init_seed,
        "step": step,
        "dtype": params.config.dtype,
        "layout": layout,
        "extra": extra_meta or {},
    }
    head = "\n".join([_MAGIC, *_header_lines(meta), "end_header"]) + "\n"
    np_dt = "<f8" if params.config.dtype == "float64" else "<f4"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(head.encode("utf-8"))
        for t in list(arrays.values()) + list(extra_arrays.values()):
            fh.write(t.detach().cpu().contiguous().numpy().astype(np_dt).tobytes())
    tmp.replace(path)


@dataclass
class Checkpoint:
    params: ModelParams
    step: int
    seed: int
    extra_arrays: dict[str, torch.Tensor]
    extra_meta: dict


def read_header(path: str | Path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    marker = b"\nend_header\n"
    end = data.find(marker)
    if not data.startswith(_MAGIC.encode()) or end < 0:
        raise ConfigError(f"{path}: not a checkpoint file")
    meta = {}
    for line in data[:end].decode("utf-8").splitlines()[1:]:
        key, _, val = line.partition(" = ")
        meta[key] = json.loads(val)
    return meta, end + len(marker)


def load_checkpoint(path: str | Path) -> Checkpoint:
    meta, offset = read_header(path)
    cfg = ModelConfig(**meta["config"])
    np_dt = np.dtype("<f8" if meta["dtype"] == "float64" else "<f4")
    with open(path, "rb") as fh:
        fh.seek(offset)
        blob = fh.read()
    pos = 0
    tensors, extras = {}, {}
    for name, shape in meta["layout"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=np_dt, count=count, offset=pos).reshape(shape)
        pos += count * np_dt.itemsize
        t = torch.from_numpy(arr.astype(np_dt.newbyteorder("="), copy=True))
        if name.startswith("extra:"):
            extras[name[len("extra:"):]] = t
        else:
            tensors[name] = t
    if pos != len(blob):
        raise ConfigError(f"{path}: trailing or missing bytes in array section")
    return Checkpoint(ModelParams(cfg, tensors), meta["step"], meta["seed"], extras, meta["extra"])

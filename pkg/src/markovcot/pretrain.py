"""Plain next-token pre-training, used for the base model and the critics."""

from __future__ import annotations

import logging
from collections import defaultdict
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .nn import AdamHyper, AdamState, ModelParams

log = logging.getLogger(__name__)


def lm_loss(params: ModelParams, docs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean next-token cross-entropy over every token of every document.

    Documents are grouped by length so no batch carries padding.
    """
    groups: dict[int, list[Sequence[int]]] = defaultdict(list)
    for d in docs:
        groups[len(d)].append(d)
    total = 0
    loss = torch.zeros((), dtype=params.config.torch_dtype)
    for length in sorted(groups):
        rows = groups[length]
        ids = torch.as_tensor([list(r) for r in rows], dtype=torch.long)
        logits = nn._forward_internal(params, ids[:, :-1])
        loss = loss + F.cross_entropy(logits.reshape(-1, logits.shape[-1]), ids.reshape(-1), reduction="sum")
        total += ids.numel()
    return loss / total


def pretrain_lm(
    params: ModelParams,
    docs: Sequence[Sequence[int]],
    steps: int,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    max_norm: float = 1.0,
    log_every: int = 0,
) -> tuple[ModelParams, list[float]]:
    """Adam on random minibatches of ``docs``; returns params and loss curve."""
    rng = np.random.default_rng(seed)
    state = AdamState()
    hyper = AdamHyper(lr=lr)
    losses = []
    for step in range(steps):
        batch = [docs[int(i)] for i in rng.integers(len(docs), size=batch_size)]
        tp = params.trainable()
        loss = lm_loss(tp, batch)
        grads = nn.clip_gradients(nn.gradients(tp, loss), max_norm)
        params, state = nn.optimizer_step(params, grads, state, hyper)
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.4f", step + 1, float(np.mean(losses[-log_every:])))
    return params, losses

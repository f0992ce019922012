"""CoT perturbation operators and the Markovian vs Non-Markovian fragility
evaluation built on them."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy import stats

from . import mlm, nn, tasks
from .errors import ConfigError, MarkovCotError
from .mlm import MLMHandle
from .seeding import derive_seed

log = logging.getLogger(__name__)

KINDS = ("Delete", "DigitReplace", "TruncateFront", "TruncateBack", "CharReplace")
SEVERITIES = (0.2, 0.4, 0.6, 0.8, 1.0)
# replacement characters: the alphabet minus whitespace and the end marker
REPLACEMENT_CHARS = "".join(c for c in tasks.ALPHABET if c not in tasks.WHITESPACE and c != tasks.EOS_CHAR)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    severity: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"perturbation kind {self.kind!r} is not one of {', '.join(KINDS)}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError(f"severity {self.severity} outside [0, 1]")


def removal_count(severity: float, n: int) -> int:
    """``round(severity * n)`` with halves rounded up, in exact decimal."""
    return int((Decimal(repr(float(severity))) * n).to_integral_value(rounding=ROUND_HALF_UP))


def _replace_chars(text: str, severity: float, rng: np.random.Generator, eligible, pool: str) -> str:
    # one uniform per eligible char decides; a replaced char draws its substitute
    # from the pool with itself removed. Eligible chars always belong to the pool.
    out = []
    for c in text:
        if eligible(c) and rng.random() < severity:
            choices = pool.replace(c, "")
            out.append(choices[int(rng.integers(len(choices)))])
        else:
            out.append(c)
    return "".join(out)


def perturb(cot: Sequence[int], spec: PerturbationSpec) -> list[int]:
    """Apply one perturbation; deterministic in ``spec.seed``."""
    cot = [int(t) for t in cot]
    n = len(cot)
    rng = np.random.default_rng(spec.seed)
    kind = spec.kind
    if kind in ("Delete", "TruncateFront", "TruncateBack"):
        m = removal_count(spec.severity, n)
        if kind == "TruncateFront":
            return cot[m:]
        if kind == "TruncateBack":
            return cot[: n - m]
        drop = set(int(i) for i in rng.choice(n, size=m, replace=False)) if m else set()
        return [t for i, t in enumerate(cot) if i not in drop]
    text = tasks.detokenize(cot)
    if kind == "DigitReplace":
        if not any(c in tasks.DIGITS for c in text):
            log.debug("DigitReplace on a digit-free CoT is the identity")
        new = _replace_chars(text, spec.severity, rng, lambda c: c in tasks.DIGITS, tasks.DIGITS)
    else:
        new = _replace_chars(text, spec.severity, rng, lambda c: c in REPLACEMENT_CHARS, REPLACEMENT_CHARS)
    return tasks.tokenize(new)


def spec_grid(kinds: Sequence[str] = KINDS, severities: Sequence[float] = SEVERITIES,
              seed: int = 0) -> list[PerturbationSpec]:
    return [PerturbationSpec(k, float(s), seed) for s in severities for k in kinds]


def example_seed(spec: PerturbationSpec, example_id: int, role: str) -> int:
    return derive_seed(spec.seed, spec.kind, repr(float(spec.severity)), example_id, role)


# ---------------------------------------------------------------------------
# log-prob fragility


@dataclass
class FragilityRecord:
    example_id: int
    kind: str
    severity: float
    effect_m: float
    effect_nm: float
    difference: float
    cot_m: str = ""
    cot_nm: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _effects(params: nn.ModelParams, contexts: list[list[int]], answer: Sequence[int]) -> list[float]:
    with torch.no_grad():
        return [float(x) for x in nn.sequence_logprob_batch(params, contexts, [list(answer)] * len(contexts))]


def sample_eval_cots(handle: MLMHandle, pairs: Sequence[tasks.QAPair], seed: int, role: str,
                     temperature: float = 1.0) -> list[list[int]]:
    ctxs = [handle.cot_context(p.question_ids) for p in pairs]
    seeds = [derive_seed(seed, role, i) for i in range(len(pairs))]
    return nn.sample_batch(handle.actor, ctxs, handle.cot_cap, temperature, seeds, handle.stop_token)


def fragility_eval(markov: MLMHandle, nonmarkov: MLMHandle, pairs: Sequence[tasks.QAPair],
                   specs: Sequence[PerturbationSpec], seed: int = 0) -> list[FragilityRecord]:
    """Per-example Effect_M, Effect_NM and their difference for every spec.

    Each model samples its own CoT for the same (q, a). Both CoTs are
    perturbed with the same spec under independent derived seeds and
    rescored with each model's own visibility rule: the Markovian model
    sees the CoT only, the Non-Markovian one sees question, prompt and CoT.
    """
    cots_m = sample_eval_cots(markov, pairs, seed, "fragility-cot-m")
    cots_nm = sample_eval_cots(nonmarkov, pairs, seed, "fragility-cot-nm")
    records = []
    for i, (pair, cm, cn) in enumerate(zip(pairs, cots_m, cots_nm)):
        try:
            pm = [perturb(cm, PerturbationSpec(s.kind, s.severity, example_seed(s, i, "m"))) for s in specs]
            pn = [perturb(cn, PerturbationSpec(s.kind, s.severity, example_seed(s, i, "nm"))) for s in specs]
            q = pair.question_ids
            lm = _effects(markov.actor, [mlm.markovian_context(markov, c) for c in [cm] + pm], pair.target_ids)
            ln = _effects(nonmarkov.actor, [mlm.nonmarkovian_context(nonmarkov, q, c) for c in [cn] + pn],
                          pair.target_ids)
        except MarkovCotError as exc:
            log.warning("example %d skipped: %s", i, exc)
            continue
        for j, s in enumerate(specs):
            # an unchanged CoT has exactly zero effect
            em = 0.0 if pm[j] == cm else lm[0] - lm[j + 1]
            en = 0.0 if pn[j] == cn else ln[0] - ln[j + 1]
            records.append(FragilityRecord(i, s.kind, float(s.severity), em, en, em - en,
                                           tasks.detokenize(cm), tasks.detokenize(cn)))
    return records


def write_records(records: Iterable, path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[FragilityRecord]:
    return [FragilityRecord(**json.loads(ln)) for ln in Path(path).read_text().splitlines() if ln]


def sign_test(values: Sequence[float]) -> float:
    """One-sided p-value that positive values outnumber negative ones (ties dropped)."""
    pos = sum(1 for v in values if v > 0)
    neg = sum(1 for v in values if v < 0)
    if pos + neg == 0:
        return 1.0
    return float(stats.binomtest(pos, pos + neg, 0.5, alternative="greater").pvalue)


# ---------------------------------------------------------------------------
# tables


@dataclass
class Cell:
    mean: float
    n: int
    stderr: float


class FragilityTable:
    """Severity x type grid of mean differences with row and column means."""

    def __init__(self, cells: dict[tuple[float, str], Cell], severities: Sequence[float], kinds: Sequence[str]):
        self.cells = cells
        self.severities = list(severities)
        self.kinds = list(kinds)

    def get(self, severity: float, kind: str) -> Cell | None:
        return self.cells.get((float(severity), kind))

    def row_mean(self, severity: float) -> float:
        vals = [c.mean for (s, _), c in self.cells.items() if s == float(severity)]
        return float(np.mean(vals)) if vals else math.nan

    def col_mean(self, kind: str) -> float:
        vals = [c.mean for (_, k), c in self.cells.items() if k == kind]
        return float(np.mean(vals)) if vals else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["severity", "type", "mean_difference", "n", "stderr"])
        for s in self.severities:
            for k in self.kinds:
                c = self.get(s, k)
                if c is not None:
                    w.writerow([repr(s), k, repr(c.mean), c.n, repr(c.stderr)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FragilityTable":
        cells, sev, kinds = {}, [], []
        for row in csv.DictReader(io.StringIO(text)):
            s, k = float(row["severity"]), row["type"]
            cells[(s, k)] = Cell(float(row["mean_difference"]), int(row["n"]), float(row["stderr"]))
            if s not in sev:
                sev.append(s)
            if k not in kinds:
                kinds.append(k)
        return cls(cells, sev, kinds)

    def to_text(self, digits: int = 3) -> str:
        head = ["severity"] + self.kinds + ["row mean"]
        rows = []
        for s in self.severities:
            row = [f"{s:.0%}"]
            for k in self.kinds:
                c = self.get(s, k)
                row.append("-" if c is None else f"{c.mean:.{digits}f}")
            row.append(f"{self.row_mean(s):.{digits}f}")
            rows.append(row)
        rows.append(["col mean"] + [f"{self.col_mean(k):.{digits}f}" for k in self.kinds] + [""])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in [head] + rows]
        return "\n".join(lines) + "\n"


def fragility_table(records: Sequence[FragilityRecord], severities: Sequence[float] | None = None,
                    kinds: Sequence[str] | None = None) -> FragilityTable:
    groups: dict[tuple[float, str], list[float]] = {}
    for r in records:
        groups.setdefault((float(r.severity), r.kind), []).append(r.difference)
    sev = list(severities) if severities is not None else sorted({s for s, _ in groups})
    kinds = list(kinds) if kinds is not None else [k for k in KINDS if any(k == g for _, g in groups)]
    cells = {}
    for key, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.nan
        cells[key] = Cell(float(v.mean()), len(v), se)
    return FragilityTable(cells, sev, kinds)


# ---------------------------------------------------------------------------
# accuracy fragility


@dataclass
class AccuracyRecord:
    example_id: int
    kind: str
    severity: float
    m_intact: bool
    m_perturbed: bool
    nm_intact: bool
    nm_perturbed: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class AccuracyDelta:
    kind: str
    severity: float
    delta_m: float
    delta_nm: float
    difference: float
    n: int


def greedy_answers(params: nn.ModelParams, contexts: list[list[int]], max_len: int) -> list[list[int]]:
    return nn.sample_batch(params, contexts, max_len, 0.0, [0] * len(contexts), stop_token=tasks.EOS)


def accuracy_fragility_records(markov: MLMHandle, nonmarkov: MLMHandle, pairs: Sequence[tasks.QAPair],
                               specs: Sequence[PerturbationSpec], seed: int = 0) -> list[AccuracyRecord]:
    """Temperature-0 exact match from intact and perturbed CoTs, per example."""
    cots_m = sample_eval_cots(markov, pairs, seed, "fragility-cot-m")
    cots_nm = sample_eval_cots(nonmarkov, pairs, seed, "fragility-cot-nm")
    records = []
    for i, (pair, cm, cn) in enumerate(zip(pairs, cots_m, cots_nm)):
        max_len = len(pair.target_ids) + 1
        try:
            pm = [perturb(cm, PerturbationSpec(s.kind, s.severity, example_seed(s, i, "m"))) for s in specs]
            pn = [perturb(cn, PerturbationSpec(s.kind, s.severity, example_seed(s, i, "nm"))) for s in specs]
            am = greedy_answers(markov.actor, [mlm.markovian_context(markov, c) for c in [cm] + pm], max_len)
            an = greedy_answers(nonmarkov.actor,
                                [mlm.nonmarkovian_context(nonmarkov, pair.question_ids, c) for c in [cn] + pn],
                                max_len)
        except MarkovCotError as exc:
            log.warning("example %d skipped: %s", i, exc)
            continue
        ok_m = [tasks.check_answer(a, pair.target_ids) for a in am]
        ok_n = [tasks.check_answer(a, pair.target_ids) for a in an]
        for j, s in enumerate(specs):
            records.append(AccuracyRecord(i, s.kind, float(s.severity), ok_m[0], ok_m[j + 1], ok_n[0], ok_n[j + 1]))
    return records


def summarize_accuracy(records: Sequence[AccuracyRecord]) -> list[AccuracyDelta]:
    groups: dict[tuple[str, float], list[AccuracyRecord]] = {}
    for r in records:
        groups.setdefault((r.kind, float(r.severity)), []).append(r)
    out = []
    for (kind, sev), rs in sorted(groups.items(), key=lambda kv: (kv[0][1], KINDS.index(kv[0][0]))):
        dm = float(np.mean([r.m_intact for r in rs]) - np.mean([r.m_perturbed for r in rs]))
        dn = float(np.mean([r.nm_intact for r in rs]) - np.mean([r.nm_perturbed for r in rs]))
        out.append(AccuracyDelta(kind, sev, dm, dn, dm - dn, len(rs)))
    return out


def accuracy_fragility(markov: MLMHandle, nonmarkov: MLMHandle, pairs: Sequence[tasks.QAPair],
                       specs: Sequence[PerturbationSpec], seed: int = 0) -> list[AccuracyDelta]:
    return summarize_accuracy(accuracy_fragility_records(markov, nonmarkov, pairs, specs, seed))

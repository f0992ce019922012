"""Task data: character tokenizer, arithmetic and continuation generators,
CoT prompt templates, answer checking and the enumeration micro-task."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError

# Id 0 is the end marker, rendered as "|" so that detokenize/tokenize is exact.
EOS_CHAR = "|"
PUNCT = "\n !'(),-./:;?+="
ALPHABET = EOS_CHAR + PUNCT + "0123456789" + "abcdefghijklmnopqrstuvwxyz"
VOCAB_SIZE = len(ALPHABET)
EOS = 0
_INDEX = {c: i for i, c in enumerate(ALPHABET)}
DIGITS = "0123456789"
WHITESPACE = " \n"


def tokenize(text: str) -> list[int]:
    try:
        return [_INDEX[c] for c in text]
    except KeyError as exc:
        raise ConfigError(f"character {exc.args[0]!r} is outside the task alphabet") from None


def detokenize(ids: Sequence[int]) -> str:
    return "".join(ALPHABET[int(i)] for i in ids)


def normalize_text(text: str) -> str:
    """Lowercase and drop anything the tokenizer cannot represent."""
    text = text.lower().replace("\t", " ").replace("\r", "")
    return "".join(c for c in text if c in _INDEX and c != EOS_CHAR)


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    question_ids: tuple[int, ...] = field(repr=False)
    answer_ids: tuple[int, ...] = field(repr=False)
    # what gets scored by the answer policy; arithmetic answers carry EOS
    target_ids: tuple[int, ...] = field(repr=False)

    @classmethod
    def build(cls, question: str, answer: str, terminate: bool) -> "QAPair":
        q, a = tokenize(question), tokenize(answer)
        return cls(question, answer, tuple(q), tuple(a), tuple(a + [EOS] if terminate else a))

    def to_json(self) -> str:
        return json.dumps({"question": self.question, "answer": self.answer})


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "arithmetic"  # arithmetic | continuation | micro
    n_terms: int = 3
    term_lo: int = 1
    term_hi: int = 9
    ctx_len: int = 64
    target_len: int = 32
    cot_cap: int = 12
    seed: int = 0
    corpus_path: str = ""

    def __post_init__(self):
        if self.kind not in ("arithmetic", "continuation", "micro"):
            raise ConfigError(f"task.kind: unknown task kind {self.kind!r}")
        if self.cot_cap < 1:
            raise ConfigError("task.cot_cap must be >= 1")
        if self.kind == "arithmetic":
            if self.n_terms < 2:
                raise ConfigError("task.n_terms must be >= 2")
            if not 1 <= self.term_lo <= self.term_hi:
                raise ConfigError("task.term_lo/term_hi must satisfy 1 <= lo <= hi")
        if self.kind == "continuation":
            if self.ctx_len < 1 or self.target_len < 1:
                raise ConfigError("task.ctx_len and task.target_len must be positive")
            if not self.corpus_path:
                raise ConfigError("task.corpus_path is required for continuation tasks")


# full-scale settings, selectable by copying into a TaskSpec
FULL_SCALE_PRESETS = {
    "arithmetic": dict(n_terms=15, term_lo=1, term_hi=99, cot_cap=150),
    "gsm8k": dict(cot_cap=100),
    "continuation": dict(ctx_len=200, target_len=100, cot_cap=50),
}


# ---------------------------------------------------------------------------
# arithmetic


def arithmetic_question(terms: Sequence[int]) -> str:
    return " + ".join(str(t) for t in terms)


def gen_arithmetic(n_terms: int, lo: int, hi: int, seed: int, terms: Sequence[int] | None = None) -> QAPair:
    """Sum of ``n_terms`` uniform integers in ``[lo, hi]``; deterministic per seed."""
    if terms is None:
        if n_terms < 2:
            raise ConfigError("n_terms must be >= 2")
        rng = np.random.default_rng(seed)
        terms = [int(x) for x in rng.integers(lo, hi + 1, size=n_terms)]
    return QAPair.build(arithmetic_question(terms), str(sum(int(t) for t in terms)), terminate=True)


def arithmetic_cot_text(terms: Sequence[int]) -> str:
    """Restatement of a problem that the answer policy can finish."""
    return arithmetic_question(terms) + " = "


# uninformative CoTs of the base model; a shared first word keeps greedy
# decoding on them while their lengths vary
FILLER_COTS = ("", "let me", "let me see", "let me add", "let me think")


def noisy_filler(text: str, rng: np.random.Generator) -> str:
    """Drop or swap a random share of characters, as in hurried scratch notes."""
    rate = float(rng.random())
    out = []
    for ch in text:
        u = float(rng.random())
        if u < rate / 2:
            continue
        out.append(_NOISE_CHARS[int(rng.integers(len(_NOISE_CHARS)))] if u < rate else ch)
    return "".join(out)


_NOISE_CHARS = "abcdefghijklmnopqrstuvwxyz "


def arithmetic_corpus(spec: TaskSpec, n_docs: int, seed: int, copy_rate: float = 0.1,
                      statement_frac: float = 0.5, filler_noise: float = 0.5) -> list[str]:
    """Plain-text documents used to pre-train the base model.

    Two document shapes are mixed. Statements ``a + b + c = <cue> s`` teach
    the model to finish a restated problem. Worked prompts
    ``question + template + cot + cue + answer`` teach the prompt format;
    their CoT restates the question only with probability ``copy_rate`` and
    is a filler phrase otherwise. The base model's most likely CoT thus
    carries no information about the question, while a sampled CoT
    occasionally does. A ``filler_noise`` share of fillers has characters
    dropped or swapped, so the prompt-reading answer does not hinge on the
    exact spelling of uninformative scratch text.
    """
    rng = np.random.default_rng(seed)
    template = prompt_template("arithmetic", spec.cot_cap)
    cue = answer_cue("arithmetic")
    docs = []
    for _ in range(n_docs):
        terms = [int(x) for x in rng.integers(spec.term_lo, spec.term_hi + 1, size=spec.n_terms)]
        if rng.random() < statement_frac:
            docs.append(arithmetic_cot_text(terms) + cue + str(sum(terms)))
            continue
        if rng.random() < copy_rate:
            shown = arithmetic_cot_text(terms)
        else:
            shown = FILLER_COTS[int(rng.integers(len(FILLER_COTS)))]
            if rng.random() < filler_noise:
                shown = noisy_filler(shown, rng)
        docs.append(arithmetic_question(terms) + template + shown[: spec.cot_cap] + cue + str(sum(terms)))
    return docs


def canonical(ids: Sequence[int]) -> str:
    text = detokenize([i for i in ids if int(i) != EOS])
    return " ".join(text.split())


def check_answer(predicted: Sequence[int], gold: Sequence[int]) -> bool:
    """Exact match after stripping end markers and normalising whitespace."""
    return canonical(predicted) == canonical(gold)


# ---------------------------------------------------------------------------
# continuation


def read_corpus(path: str | Path) -> list[list[int]]:
    """Documents separated by blank lines, normalised to the task alphabet."""
    raw = Path(path).read_text(encoding="utf-8")
    docs = []
    for block in re.split(r"\n\s*\n", raw):
        text = " ".join(normalize_text(block).split())
        if text:
            docs.append(tokenize(text))
    return docs


def continuation_windows(docs: Sequence[Sequence[int]], ctx_len: int, target_len: int) -> list[tuple[int, int]]:
    need = ctx_len + target_len
    return [(d, s) for d, doc in enumerate(docs) for s in range(len(doc) - need + 1)]


def continuation_samples(docs: Sequence[Sequence[int]], ctx_len: int, target_len: int,
                         seed: int) -> Iterator[QAPair]:
    """Endless stream of (first ctx_len tokens, next target_len tokens) windows.

    Windows are drawn uniformly from all in-document offsets, so none
    crosses a document boundary.
    """
    windows = continuation_windows(docs, ctx_len, target_len)
    if not windows:
        raise ConfigError(
            f"corpus has no document with {ctx_len + target_len} tokens for a continuation window"
        )
    rng = np.random.default_rng(seed)
    while True:
        d, s = windows[int(rng.integers(len(windows)))]
        doc = docs[d]
        q = detokenize(doc[s : s + ctx_len])
        a = detokenize(doc[s + ctx_len : s + ctx_len + target_len])
        yield QAPair.build(q, a, terminate=False)


# ---------------------------------------------------------------------------
# templates

_TEMPLATES = {
    "arithmetic": "you will be given an arithmetic problem, which you have {k} tokens "
    "to work through step-by-step. question:",
    "reasoning": "you will be given a reasoning problem, which you have {k} tokens "
    "to work through step-by-step. question:",
    "continuation": "compress your understanding of this text into {k} tokens, "
    "then predict the next {n} tokens.",
}


# text between the CoT and the answer; arithmetic answers follow an explicit
# cue, continuations follow the CoT directly
_ANSWER_CUES = {"arithmetic": "\nanswer: ", "reasoning": "\nanswer: ", "continuation": "", "micro": ""}


def answer_cue(kind: str) -> str:
    return _ANSWER_CUES[kind]


def prompt_template(kind: str, cot_cap: int, target_len: int | None = None) -> str:
    if kind == "micro":
        return ""
    return _TEMPLATES[kind].format(k=cot_cap, n=target_len if target_len is not None else "")


def prompt_template_ids(kind: str, cot_cap: int, target_len: int | None = None) -> list[int]:
    return tokenize(prompt_template(kind, cot_cap, target_len))


# ---------------------------------------------------------------------------
# micro-task for the enumeration oracle


@dataclass(frozen=True)
class MicroTask:
    """Tiny fully enumerable instance: questions and answers are raw ids."""

    vocab_size: int = 4
    cot_cap: int = 2
    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = (((0,), (1,)), ((2,), (3,)))
    cot_init: tuple[int, ...] = ()

    @property
    def cot_space_size(self) -> int:
        return self.vocab_size**self.cot_cap


def micro_oracle_task(vocab_size: int = 4, cot_cap: int = 2) -> MicroTask:
    if vocab_size > 5 or cot_cap > 2:
        raise ConfigError("micro task is limited to vocab <= 5 and K <= 2")
    pairs = tuple(((q,), ((q + 1) % vocab_size,)) for q in range(0, vocab_size, 2))
    return MicroTask(vocab_size, cot_cap, pairs)


# ---------------------------------------------------------------------------


class TaskSource:
    """Deterministic per-index access to a task's (q, a) pairs."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self._docs = read_corpus(spec.corpus_path) if spec.kind == "continuation" else None
        if self._docs is not None:
            self._windows = continuation_windows(self._docs, spec.ctx_len, spec.target_len)
            if not self._windows:
                raise ConfigError("task.corpus_path: corpus too small for one window")

    def pair(self, seed: int) -> QAPair:
        s = self.spec
        if s.kind == "arithmetic":
            return gen_arithmetic(s.n_terms, s.term_lo, s.term_hi, seed)
        if s.kind == "continuation":
            rng = np.random.default_rng(seed)
            d, off = self._windows[int(rng.integers(len(self._windows)))]
            doc = self._docs[d]
            q = detokenize(doc[off : off + s.ctx_len])
            a = detokenize(doc[off + s.ctx_len : off + s.ctx_len + s.target_len])
            return QAPair.build(q, a, terminate=False)
        raise ConfigError("micro tasks have no text source")

    def cot_init_ids(self) -> list[int]:
        return prompt_template_ids(self.spec.kind, self.spec.cot_cap, self.spec.target_len)

    def answer_cue_ids(self) -> list[int]:
        return tokenize(answer_cue(self.spec.kind))

    def cot_stop_token(self) -> int:
        """A CoT ends where the answer cue would begin, or at the end marker."""
        cue = self.answer_cue_ids()
        return cue[0] if cue else EOS

    def pretrain_docs(self, n_docs: int, seed: int, copy_rate: float) -> list[list[int]]:
        if self.spec.kind == "arithmetic":
            return [tokenize(d) + [EOS] for d in arithmetic_corpus(self.spec, n_docs, seed, copy_rate)]
        return [list(d) + [EOS] for d in self._docs]


def export_jsonl(pairs: Sequence[QAPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")

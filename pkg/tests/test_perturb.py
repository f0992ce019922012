import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from markovcot import perturb, tasks
from markovcot.errors import ConfigError
from markovcot.perturb import PerturbationSpec

from test_trainer import setup, small_config

ALL_SEVERITIES = (0.0, 0.5, 1.0)


# ---------------------------------------------------------------------------
# an independent re-implementation, written against the operator definitions


def ref_count(severity, n):
    x = Fraction(repr(float(severity))) * n
    return math.floor(x + Fraction(1, 2))


def ref_replace(text, severity, rng, pool):
    out = ""
    for c in text:
        if c not in pool:
            out += c
            continue
        if rng.random() < severity:
            # draw from the pool minus c by skipping c's slot
            j = int(rng.integers(len(pool) - 1))
            out += pool[j] if j < pool.index(c) else pool[j + 1]
        else:
            out += c
    return out


def ref_perturb(cot, kind, severity, seed):
    rng = np.random.default_rng(seed)
    n = len(cot)
    m = ref_count(severity, n)
    if kind == "TruncateFront":
        return list(cot[m:])
    if kind == "TruncateBack":
        return list(cot[: n - m])
    if kind == "Delete":
        keep = np.ones(n, dtype=bool)
        if m:
            keep[rng.choice(n, size=m, replace=False)] = False
        return [t for t, k in zip(cot, keep) if k]
    pool = tasks.DIGITS if kind == "DigitReplace" else perturb.REPLACEMENT_CHARS
    return tasks.tokenize(ref_replace(tasks.detokenize(cot), severity, rng, pool))


def random_cot(rng, max_len=24):
    n = int(rng.integers(0, max_len + 1))
    return [int(t) for t in rng.integers(0, tasks.VOCAB_SIZE, size=n)]


@pytest.mark.parametrize("kind", perturb.KINDS)
@pytest.mark.parametrize("severity", ALL_SEVERITIES)
def test_matches_reference_implementation(kind, severity):
    rng = np.random.default_rng(123)
    for seed in range(1000):
        cot = random_cot(rng)
        got = perturb.perturb(cot, PerturbationSpec(kind, severity, seed))
        assert got == ref_perturb(cot, kind, severity, seed)


@pytest.mark.parametrize("kind", perturb.KINDS)
@pytest.mark.parametrize("severity", ALL_SEVERITIES)
def test_length_laws(kind, severity):
    rng = np.random.default_rng(7)
    for seed in range(1000):
        cot = random_cot(rng)
        got = perturb.perturb(cot, PerturbationSpec(kind, severity, seed))
        if kind in ("Delete", "TruncateFront", "TruncateBack"):
            assert len(got) == len(cot) - ref_count(severity, len(cot))
        else:
            assert len(got) == len(cot)
        if severity == 0.0:
            assert got == cot


def test_count_rounding_is_half_up():
    assert perturb.removal_count(0.5, 3) == 2
    assert perturb.removal_count(0.5, 5) == 3
    assert perturb.removal_count(0.2, 12) == 2
    assert perturb.removal_count(1.0, 0) == 0


def test_definitional_examples():
    toks = tasks.tokenize("abcd")
    assert perturb.perturb(toks, PerturbationSpec("TruncateBack", 0.5)) == tasks.tokenize("ab")
    assert perturb.perturb(toks, PerturbationSpec("TruncateFront", 0.5)) == tasks.tokenize("cd")
    assert perturb.perturb(toks, PerturbationSpec("Delete", 1.0, seed=4)) == []
    assert perturb.perturb([], PerturbationSpec("CharReplace", 1.0)) == []


def test_digit_replace_full_severity_changes_every_digit():
    cot = tasks.tokenize("95")
    for seed in range(1000):
        out = tasks.detokenize(perturb.perturb(cot, PerturbationSpec("DigitReplace", 1.0, seed)))
        assert len(out) == 2 and all(c in tasks.DIGITS for c in out)
        assert out[0] != "9" and out[1] != "5"


def test_digit_replace_is_identity_without_digits():
    cot = tasks.tokenize("let me think = ok")
    for s in range(50):
        assert perturb.perturb(cot, PerturbationSpec("DigitReplace", 1.0, s)) == cot


@given(st.text(alphabet=tasks.ALPHABET, max_size=30), st.integers(0, 2**31), st.sampled_from(perturb.KINDS[1::3]))
@settings(max_examples=300)
def test_replacement_never_keeps_a_char_at_full_severity(text, seed, kind):
    out = tasks.detokenize(perturb.perturb(tasks.tokenize(text), PerturbationSpec(kind, 1.0, seed)))
    pool = tasks.DIGITS if kind == "DigitReplace" else perturb.REPLACEMENT_CHARS
    for a, b in zip(text, out):
        assert (a != b) if a in pool else (a == b)


def test_whitespace_is_never_replaced():
    cot = tasks.tokenize("1 + 2 = 3\n")
    out = tasks.detokenize(perturb.perturb(cot, PerturbationSpec("CharReplace", 1.0, 3)))
    assert [i for i, c in enumerate(out) if c in tasks.WHITESPACE] == [1, 3, 5, 7, 9]


def test_delete_keeps_order():
    cot = list(range(20))
    out = perturb.perturb(cot, PerturbationSpec("Delete", 0.4, 11))
    assert out == sorted(out) and len(out) == 12


def test_spec_validation():
    with pytest.raises(ConfigError):
        PerturbationSpec("Shuffle", 0.2)
    with pytest.raises(ConfigError):
        PerturbationSpec("Delete", 1.5)


# ---------------------------------------------------------------------------
# tables and statistics


def record(i, kind, sev, d):
    return perturb.FragilityRecord(i, kind, sev, d, 0.0, d)


def test_single_record_cell():
    table = perturb.fragility_table([record(0, "Delete", 0.2, 0.5)])
    assert table.get(0.2, "Delete").mean == 0.5
    assert table.get(0.2, "CharReplace") is None


def test_full_grid_layout_and_means():
    rng = np.random.default_rng(0)
    recs = [record(i, k, s, float(rng.normal())) for i in range(4) for s in perturb.SEVERITIES for k in perturb.KINDS]
    table = perturb.fragility_table(recs)
    text = table.to_text()
    lines = text.strip().split("\n")
    assert len(lines) == 1 + 5 + 1
    assert lines[0].split() == ["severity"] + list(perturb.KINDS) + ["row", "mean"]
    cell = [r.difference for r in recs if r.kind == "Delete" and r.severity == 0.6]
    assert table.get(0.6, "Delete").mean == pytest.approx(np.mean(cell), abs=1e-12)
    back = perturb.FragilityTable.from_csv(table.to_csv())
    for s in perturb.SEVERITIES:
        assert back.row_mean(s) == pytest.approx(table.row_mean(s), abs=1e-9)
    for k in perturb.KINDS:
        assert back.col_mean(k) == pytest.approx(table.col_mean(k), abs=1e-9)
    assert table.to_csv().splitlines()[0] == "severity,type,mean_difference,n,stderr"


def test_missing_cells_excluded_from_means():
    table = perturb.fragility_table([record(0, "Delete", 0.2, 1.0), record(0, "Delete", 0.4, 3.0)],
                                    severities=[0.2, 0.4], kinds=["Delete", "CharReplace"])
    assert table.col_mean("Delete") == 2.0
    assert math.isnan(table.col_mean("CharReplace"))
    assert "-" in table.to_text()


def test_sign_test():
    assert perturb.sign_test([1.0] * 10) == pytest.approx(0.5 ** 10)
    assert perturb.sign_test([0.0, 0.0]) == 1.0
    assert perturb.sign_test([1.0, -1.0]) == pytest.approx(0.75)


def test_record_jsonl_roundtrip(tmp_path):
    recs = [record(i, "Delete", 0.2, i / 3) for i in range(3)]
    perturb.write_records(recs, tmp_path / "r.jsonl")
    assert perturb.read_records(tmp_path / "r.jsonl") == recs
    assert json.loads(recs[0].to_json())["difference"] == 0.0


# ---------------------------------------------------------------------------
# evaluation on small models


@pytest.fixture(scope="module")
def pair_of_handles():
    config = small_config()
    m, src, _ = setup(config, actor_seed=5)
    nm, _, _ = setup(small_config("NonMarkovianGRPO"), actor_seed=6)
    pairs = [src.pair(i) for i in range(6)]
    return m, nm, pairs


def test_fragility_severity_zero_is_exactly_zero(pair_of_handles):
    m, nm, pairs = pair_of_handles
    specs = [PerturbationSpec(k, 0.0) for k in perturb.KINDS]
    recs = perturb.fragility_eval(m, nm, pairs, specs, seed=1)
    assert len(recs) == len(pairs) * len(specs)
    assert all(r.effect_m == 0.0 and r.effect_nm == 0.0 and r.difference == 0.0 for r in recs)


def test_fragility_is_deterministic(pair_of_handles):
    m, nm, pairs = pair_of_handles
    specs = perturb.spec_grid(severities=[0.6, 1.0], seed=2)
    a = perturb.fragility_eval(m, nm, pairs, specs, seed=3)
    b = perturb.fragility_eval(m, nm, pairs, specs, seed=3)
    assert a == b
    assert all(r.difference == r.effect_m - r.effect_nm for r in a)
    assert any(r.effect_m != 0.0 for r in a)


def test_accuracy_deltas_match_records(pair_of_handles):
    m, nm, pairs = pair_of_handles
    specs = perturb.spec_grid(kinds=["Delete", "TruncateBack"], severities=[0.0, 1.0])
    recs = perturb.accuracy_fragility_records(m, nm, pairs, specs, seed=0)
    deltas = perturb.summarize_accuracy(recs)
    assert len(deltas) == 4
    for d in deltas:
        rs = [r for r in recs if r.kind == d.kind and r.severity == d.severity]
        dm = np.mean([r.m_intact for r in rs]) - np.mean([r.m_perturbed for r in rs])
        assert d.delta_m == pytest.approx(dm, abs=1e-12)
        assert d.n == len(pairs)
        if d.severity == 0.0:
            assert d.delta_m == 0.0 and d.delta_nm == 0.0 and d.difference == 0.0

from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL
from mintkit.evalmetrics.report import CSV_COLUMNS, EvalReport, compare, evaluate, render_table, to_csv
from mintkit.evalmetrics.similarity import anls, exact_match, levenshtein, nls, normalize, sample_anls
from mintkit.interp.perplexity import perplexity_teacher_forced
from mintkit.model import build_model
from mintkit.model.ids import MaskSet
from mintkit.tensor.autograd import ContractError


def _brute_distance(a: str, b: str) -> int:
    """Recursive edit distance straight from the definition (memoised)."""

    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def test_nls_matches_brute_force_on_1000_pairs():
    rng = np.random.default_rng(0)
    alphabet = np.array(list("abcv3 -:"))
    for _ in range(1000):
        a = "".join(rng.choice(alphabet, int(rng.integers(0, 13))))
        b = "".join(rng.choice(alphabet, int(rng.integers(0, 13))))
        pa, pb = normalize(a), normalize(b)
        want = 1.0 if not (pa or pb) else 1.0 - _brute_distance(pa, pb) / max(len(pa), len(pb))
        assert nls(a, b) == want
        assert levenshtein(pa, pb) == _brute_distance(pa, pb)


def test_nls_examples():
    assert nls("v3", "v3") == 1.0
    assert nls("", "abc") == 0.0
    assert nls("date", "dates") == pytest.approx(0.8)
    assert nls("", "") == 1.0
    assert nls("  V3 ", "v3") == 1.0


@settings(max_examples=100)
@given(st.text(alphabet="abXY 1", max_size=10), st.text(alphabet="abXY 1", max_size=10), st.text(alphabet="abXY 1", max_size=10))
def test_edit_distance_is_a_metric(a, b, c):
    assert nls(a, b) == nls(b, a)
    assert 0.0 <= nls(a, b) <= 1.0
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_anls_examples():
    assert anls(["v3", "k1"], ["v3", "k1"]) == 1.0
    # 0.4 sits under the cutoff
    assert anls(["abcde"], ["abxyz"]) == 0.0
    preds = ["v3", "date", "abcde"]
    refs = ["v3", "dates", "abfgh"]
    assert [nls(p, r) for p, r in zip(preds, refs)] == pytest.approx([1.0, 0.8, 0.4])
    assert anls(preds, refs) == pytest.approx(0.6)
    assert sample_anls("dat", ["xyz", "date"]) == pytest.approx(0.75)
    with pytest.raises(ContractError):
        anls(["a"], ["a", "b"])
    with pytest.raises(ContractError):
        sample_anls("a", [])
    with pytest.raises(ContractError):
        anls(["a"], ["a"], tau=1.5)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.text("abc", max_size=6), st.text("abc", max_size=6)), min_size=1, max_size=8), st.floats(0, 1), st.floats(0, 1))
def test_anls_monotone_in_tau(pairs, t1, t2):
    lo, hi = sorted((t1, t2))
    p, r = zip(*pairs)
    assert anls(p, r, hi) <= anls(p, r, lo) + 1e-12
    em = np.mean([exact_match(a, b) for a, b in pairs])
    assert em <= anls(p, r, lo) + 1e-12


# ---------------------------------------------------------------- evaluate and compare


def test_evaluate_fields(small_model, small_data):
    data = small_data[:10]
    plain = evaluate(small_model, data)
    same = evaluate(small_model, data, MaskSet.identity())
    assert plain.to_dict(True) == same.to_dict(True)
    assert 0.0 <= plain.anls <= 1.0 and plain.exact_match <= plain.anls + 1e-12
    assert plain.perplexity == pytest.approx(perplexity_teacher_forced(small_model, data), rel=1e-12)
    assert plain.n_samples == 10 and len(plain.predictions) == 10
    assert set(plain.per_task_anls) == {ex.task for ex in data}
    assert EvalReport.from_dict(plain.to_dict(True)) == plain


def _report(rid, anls_, params, flops, split="evaluation"):
    return EvalReport(f"m-{rid}", rid, split, anls_, anls_ / 2, 1.5, {"keyvalue": anls_}, params, flops, 60, [0])


def test_compare_fractions_and_order():
    t = _report("teacher", 0.9, 1000, 500)
    rows = compare([_report("a", 0.5, 310, 200), t, _report("b", 0.7, 70, 100)])
    assert [r.recipe_id for r in rows] == ["teacher", "b", "a"]
    assert (rows[0].param_fraction, rows[0].flop_fraction, rows[0].anls_delta) == (1.0, 1.0, 0.0)
    assert rows[2].param_fraction == pytest.approx(0.31)
    self_rows = compare([t, t])
    assert all(r.anls_delta == 0.0 for r in self_rows)
    with pytest.raises(ContractError):
        compare([t, _report("x", 0.1, 10, 10, split="selection")])
    with pytest.raises(ContractError):
        compare([t])
    assert "teacher" in render_table(rows)


GOLDEN_CSV = (
    "model_id,recipe_id,split,anls,exact_match,perplexity,n_params,flops,n_samples,seeds,"
    "anls_transcription,anls_keyword,anls_keyvalue,anls_casing\n"
    "m-teacher,teacher,evaluation,0.900000,0.450000,1.500000,1000,500,60,0,,,0.900000,\n"
    "m-a,a,evaluation,0.500000,0.250000,1.500000,310,200,60,0,,,0.500000,\n"
)


def test_csv_golden():
    assert CSV_COLUMNS[:4] == ("model_id", "recipe_id", "split", "anls")
    assert to_csv([_report("teacher", 0.9, 1000, 500), _report("a", 0.5, 310, 200)]) == GOLDEN_CSV


def test_memorised_set_scores_exact(small_data):
    from mintkit.distill.trainer import TeacherConfig, train_teacher

    data = small_data[:8]
    model, _ = train_teacher(build_model(SMALL, 0), data, TeacherConfig(steps=600, lr=3e-3, warmup=10, batch_size=8))
    rep = evaluate(model, data)
    assert rep.exact_match == 1.0 and rep.anls == 1.0

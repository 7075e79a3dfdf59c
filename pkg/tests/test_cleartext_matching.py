import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from iris_he.cleartext_matching import (
    MatchPolicy,
    MatchResult,
    TemplateRecord,
    area_under_roc,
    d_prime,
    equal_error_rate,
    evaluate_database,
    f1_at,
    fractional_hd,
    match_with_shifts,
    roc_points,
    select_best,
    shift_counts,
    write_pairs_csv,
    write_roc_csv,
    write_summary_csv,
)
from iris_he.encoding import IrisTemplate, load_template, template_rotate
from iris_he.errors import EvaluationError, InsufficientOverlapError
from iris_he.synthetic import random_template, synthetic_population


def _naive(a, b):
    d = n = 0
    for xa, xb, ma, mb in zip(a.code.ravel(), b.code.ravel(), a.mask.ravel(), b.mask.ravel()):
        if ma and mb:
            n += 1
            d += int(xa != xb)
    return d, n


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1.0))
def test_fractional_hd_matches_naive_count(seed, density):
    rng = np.random.default_rng(seed)
    a = random_template(rng, (3, 40), density)
    b = random_template(rng, (3, 40), density)
    d, n = _naive(a, b)
    if n < 1:
        return
    assert fractional_hd(a, b, min_valid_bits=1) == (d, n)


@given(st.integers(0, 2**32 - 1))
def test_fractional_hd_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = random_template(rng, (4, 64), 0.8)
    b = random_template(rng, (4, 64), 0.8)
    assert fractional_hd(a, b, 1) == fractional_hd(b, a, 1)


def test_self_match_is_zero():
    t = random_template(np.random.default_rng(1), mask_density=0.9)
    res = match_with_shifts(t, t)
    assert (res.hd, res.numerator, res.best_shift, res.decision) == (0.0, 0, 0, True)
    assert res.line().startswith("HD 0.0000")


def test_worked_examples_from_fixtures(fixtures_dir):
    a = load_template(fixtures_dir / "genuine_a.tpl")
    b = load_template(fixtures_dir / "genuine_b.tpl")
    assert fractional_hd(a, b) == (1914, 11761)
    a = load_template(fixtures_dir / "impostor_a.tpl")
    b = load_template(fixtures_dir / "impostor_b.tpl")
    assert fractional_hd(a, b) == (4736, 10071)


def test_insufficient_overlap():
    a = IrisTemplate(np.zeros((2, 8), np.uint8), np.ones((2, 8), np.uint8))
    with pytest.raises(InsufficientOverlapError):
        fractional_hd(a, a)
    with pytest.raises(InsufficientOverlapError):
        match_with_shifts(a, a, MatchPolicy(shift_window=2))


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        fractional_hd(random_template(rng, (2, 8)), random_template(rng, (2, 9)), 1)


def test_policy_shift_order():
    assert MatchPolicy(shift_window=2).shifts() == [0, -1, 1, -2, 2]
    assert len(MatchPolicy().shifts()) == 31
    with pytest.raises(ValueError):
        MatchPolicy(threshold=1.0)
    with pytest.raises(ValueError):
        MatchPolicy(shift_window=-1)


def test_ties_prefer_small_then_negative_shift():
    pol = MatchPolicy(min_valid_bits=1)
    assert select_best([(2, 1, 10), (-2, 1, 10), (1, 1, 10), (-1, 1, 10)], pol).best_shift == -1
    assert select_best([(3, 1, 10), (-3, 1, 10)], pol).best_shift == -3
    assert select_best([(0, 2, 10), (5, 1, 10)], pol).best_shift == 5


def test_decision_is_strict():
    assert MatchResult.from_counts(35, 100, 0, 0.35).decision is False
    assert MatchResult.from_counts(34, 100, 0, 0.35).decision is True


def test_enrolled_as_rotated_query_uses_query_shift_sign():
    # shift is applied to the query: rotating the query by +7 reproduces the enrolled template
    query = random_template(np.random.default_rng(7))
    res = match_with_shifts(query, template_rotate(query, 7))
    assert (res.hd, res.best_shift) == (0.0, 7)


@given(st.integers(-15, 15), st.integers(0, 1000))
def test_rotated_query_found_at_compensating_shift(k, seed):
    enrolled = random_template(np.random.default_rng(seed), mask_density=0.9)
    res = match_with_shifts(template_rotate(enrolled, k), enrolled)
    assert res.hd == 0.0 and res.best_shift == -k


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(-20, 20), min_size=1, max_size=6, unique=True))
def test_shift_counts_match_explicit_rotation(seed, shifts):
    rng = np.random.default_rng(seed)
    a = random_template(rng, (3, 64), 0.7)
    b = random_template(rng, (3, 64), 0.7)
    counts = shift_counts(a, b, shifts)
    for k, (d, n) in zip(shifts, counts):
        assert (d, n) == _naive(template_rotate(a, k), b)


def test_roc_eer_hand_computed():
    gen = np.array([0.1, 0.5])
    imp = np.array([0.3, 0.6, 0.7])
    roc = roc_points(gen, imp)
    assert math.isclose(equal_error_rate(roc), 1 / 3)
    gen = np.array([0.1, 0.2, 0.3, 0.45])
    imp = np.array([0.4, 0.5, 0.6, 0.7])
    assert math.isclose(equal_error_rate(roc_points(gen, imp)), 0.25)


def test_separated_scores_are_perfect():
    gen = np.array([0.1, 0.12, 0.2])
    imp = np.array([0.45, 0.5, 0.55])
    roc = roc_points(gen, imp)
    assert equal_error_rate(roc) == 0.0
    assert area_under_roc(roc) == 1.0
    assert f1_at(gen, imp, 0.35) == 1.0


@given(
    st.lists(st.integers(0, 20), min_size=1, max_size=30),
    st.lists(st.integers(0, 20), min_size=1, max_size=30),
)
def test_auc_equals_mann_whitney(g, i):
    gen = np.array(g) / 20
    imp = np.array(i) / 20
    wins = sum((a < b) + 0.5 * (a == b) for a in gen for b in imp)
    assert math.isclose(area_under_roc(roc_points(gen, imp)), wins / (gen.size * imp.size), abs_tol=1e-12)


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=30),
    st.lists(st.floats(0, 1), min_size=1, max_size=30),
)
def test_roc_rates_are_monotone_and_bounded(g, i):
    roc = roc_points(np.array(g), np.array(i))
    far = [p[0] for p in roc]
    frr = [p[1] for p in roc]
    assert far[0] == 0.0 and far[-1] == 1.0 and frr[-1] == 0.0
    assert all(x <= y for x, y in zip(far, far[1:]))
    assert all(x >= y for x, y in zip(frr, frr[1:]))
    assert 0.0 <= equal_error_rate(roc) <= 1.0


def test_d_prime_and_f1():
    gen = np.array([0.1, 0.3])
    imp = np.array([0.4, 0.6])
    assert math.isclose(d_prime(gen, imp), 0.3 / 0.1)
    # at 0.35: tp 2, fp 0 -> 1.0; at 0.5: tp 2, fp 1 -> precision 2/3, recall 1
    assert math.isclose(f1_at(gen, imp, 0.5), 0.8)


def _records(seed=3, subjects=6, samples=3, rate=0.15, density=1.0):
    return [TemplateRecord(s, e, k, t) for s, e, k, t in synthetic_population(subjects, samples, rate, seed, density)]


def test_evaluate_database_counts_and_separation():
    recs = _records()
    rep = evaluate_database(recs)
    assert rep.genuine_count == 6 * 3
    assert rep.impostor_count == 18 * 17 // 2 - 18
    assert rep.comparison_count == rep.genuine_count + rep.impostor_count
    assert abs(rep.genuine_hd_mean - 0.15) < 0.02
    assert rep.eer == 0.0 and rep.auc == 1.0


def test_evaluate_database_excludes_other_eye_of_same_subject():
    recs = _records(subjects=3, samples=2)
    extra = TemplateRecord("S0001", "R", "01", recs[0].template)
    rep = evaluate_database(recs + [extra])
    labels = {(p.label_a, p.label_b) for p in rep.pairs}
    assert not any("S0001/R/01" in pair and "S0001/L" in " ".join(pair) for pair in labels)
    # subjects hold 3, 2 and 2 samples: 3 genuine pairs, 3*2 + 3*2 + 2*2 impostor pairs
    assert (rep.genuine_count, rep.impostor_count) == (3, 16)


def test_evaluate_database_thread_count_does_not_change_results(monkeypatch):
    recs = _records(subjects=4, samples=2, density=0.8)
    monkeypatch.setenv("IRIS_HE_THREADS", "1")
    one = evaluate_database(recs)
    monkeypatch.setenv("IRIS_HE_THREADS", "3")
    many = evaluate_database(recs)
    assert [(p.label_a, p.label_b, p.result) for p in one.pairs] == [(p.label_a, p.label_b, p.result) for p in many.pairs]


def test_evaluate_database_errors():
    recs = _records(subjects=1, samples=3)
    with pytest.raises(EvaluationError, match="impostor"):
        evaluate_database(recs)
    one_each = [r for r in _records(subjects=3, samples=2) if r.sample == "01"]
    with pytest.raises(EvaluationError, match="genuine"):
        evaluate_database(one_each)


def test_evaluate_database_skips_low_overlap_pairs():
    recs = _records(subjects=3, samples=2)
    empty = IrisTemplate(recs[0].template.code, np.zeros_like(recs[0].template.mask))
    recs.append(TemplateRecord("S0009", "L", "01", empty))
    rep = evaluate_database(recs)
    assert rep.skipped_count == 6


def test_csv_outputs(tmp_path):
    rep = evaluate_database(_records(subjects=3, samples=2))
    write_pairs_csv(tmp_path / "p.csv", rep.pairs)
    write_summary_csv(tmp_path / "s.csv", rep)
    write_roc_csv(tmp_path / "r.csv", rep)
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["label_a", "label_b", "kind", "hd", "numerator", "denominator", "best_shift"]
    assert len(rows) == 1 + rep.comparison_count
    for r in rows[1:]:
        assert math.isclose(float(r[3]), int(r[4]) / int(r[5]), abs_tol=1e-6)
    assert list(csv.reader(open(tmp_path / "r.csv")))[0] == ["threshold", "far", "frr"]
    summary = dict(list(csv.reader(open(tmp_path / "s.csv")))[1:])
    assert int(summary["comparisons"]) == rep.comparison_count

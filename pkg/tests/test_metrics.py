import json
import warnings

import pytest
from hypothesis import given, strategies as st

from floodtweets.data import Label
from floodtweets.errors import DataError
from floodtweets.metrics import (REFERENCE_MICRO_F1, EvaluationReport, UndefinedMetricWarning, compare_runs,
                                 confusion, evaluate, micro_f1, reference_reports)

R, N = Label.RELEVANT, Label.NOT_RELEVANT


def test_perfect():
    golds = [R, N] * 5
    c = confusion(golds, golds)
    assert sum(c.tp.values()) == 10 and not any(c.fp.values()) and not any(c.fn.values())
    assert micro_f1(c) == 1.0


def test_all_flipped():
    golds = [R, N] * 5
    c = confusion([N, R] * 5, golds)
    assert not any(c.tp.values())
    assert micro_f1(c) == 0.0


def test_seven_of_ten():
    golds = [R] * 5 + [N] * 5
    preds = [R] * 4 + [N] + [N] * 3 + [R, R]
    # tp=7, fp=3, fn=3 pooled over both classes: P=R=0.7
    assert micro_f1(confusion(preds, golds)) == pytest.approx(0.7, abs=1e-12)


def test_length_mismatch():
    with pytest.raises(DataError):
        confusion([R], [R, N])


def test_empty_warns_and_scores_zero():
    with pytest.warns(UndefinedMetricWarning):
        assert micro_f1(confusion([], [])) == 0.0


def test_evaluate_skips_missing_predictions():
    rep = evaluate("run3_scene", [R, None, N], [R, N, R])
    assert (rep.n_evaluated, rep.n_skipped) == (2, 1)
    assert rep.micro_f1 == 0.5
    assert rep.feature_type


def test_report_json_round_trip(tmp_path):
    rep = evaluate("run2_text", [R, N, R], [R, N, N])
    back = EvaluationReport.from_dict(json.loads(rep.save(tmp_path / "r.json").read_text()))
    assert back == rep
    assert rep.to_dict()["positive_class_f1"] == pytest.approx(2 / 3)


def test_rendering_rounds_to_three_places():
    rep = evaluate("run2_text", [R], [R])
    rep.micro_f1 = 0.8591
    table = compare_runs([rep])
    assert "0.859" in table.text and "0.8591" not in table.text
    assert len(table.csv.strip().splitlines()) == 2


def test_reference_table_has_four_rows():
    table = compare_runs(reference_reports())
    assert len(table.csv.strip().splitlines()) == 1 + 4
    for score in REFERENCE_MICRO_F1.values():
        assert f"{score:.3f}" in table.text


def test_duplicate_run_ids_rejected():
    rep = evaluate("run2_text", [R], [R])
    with pytest.raises(DataError, match="run2_text"):
        compare_runs([rep, rep])


@given(st.lists(st.tuples(st.sampled_from(list(Label)), st.sampled_from(list(Label))), min_size=1, max_size=50))
def test_micro_equals_accuracy(pairs):
    preds, golds = zip(*pairs)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        score = micro_f1(confusion(preds, golds))
    assert abs(score - sum(p == g for p, g in pairs) / len(pairs)) <= 1e-12


@given(st.lists(st.tuples(st.sampled_from(list(Label)), st.sampled_from(list(Label))), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_permutation_invariant_and_bounded(pairs, rnd):
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    a = evaluate("run2_text", *zip(*pairs))
    b = evaluate("run2_text", *zip(*shuffled))
    assert a.to_dict() == b.to_dict()
    for scores in a.per_class.values():
        assert all(0.0 <= v <= 1.0 for v in scores.values())
    assert 0.0 <= a.micro_f1 <= 1.0

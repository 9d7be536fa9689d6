import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvexplain.metrics import (CATEGORIES, REPORT_ROWS, MetricsError, build_eval_report, confusion_matrix,
                               fleiss_kappa, macro_f1, pairwise_agreement, rating_counts)

from oracles import fleiss_by_pairs

# Classic 10 items x 14 raters x 5 categories table, given as per-item counts.
WIKI_COUNTS = [
    [0, 0, 0, 0, 14], [0, 2, 6, 4, 2], [0, 0, 3, 5, 6], [0, 3, 9, 2, 0], [2, 2, 8, 1, 1],
    [7, 7, 0, 0, 0], [3, 2, 6, 3, 0], [2, 5, 3, 2, 2], [6, 5, 2, 1, 0], [0, 2, 2, 3, 7],
]


def counts_to_matrix(counts):
    return [[j for j, c in enumerate(row) for _ in range(c)] for row in counts]


def test_fleiss_two_raters_balanced_is_zero():
    # items agree half the time and both labels are equally common: P = Pe = 1/2
    assert fleiss_kappa([("x", "x"), ("x", "y"), ("y", "y"), ("y", "x")]) == pytest.approx(0.0, abs=1e-9)


def test_fleiss_three_raters_hand_computed():
    # P_i = 1, 1/3, 1 -> P = 7/9;  p = (5/9, 4/9) -> Pe = 41/81;  kappa = 22/40
    assert fleiss_kappa([("a", "a", "a"), ("a", "a", "b"), ("b", "b", "b")]) == pytest.approx(0.55, abs=1e-9)


def test_fleiss_reference_table():
    # P = 0.37802..., Pe = 0.21345...; the published value rounds to 0.210
    k = fleiss_kappa(counts_to_matrix(WIKI_COUNTS))
    p_i = [(sum(c * c for c in r) - 14) / (14 * 13) for r in WIKI_COUNTS]
    p_j = [sum(r[j] for r in WIKI_COUNTS) / 140 for j in range(5)]
    pe = sum(p * p for p in p_j)
    assert k == pytest.approx((np.mean(p_i) - pe) / (1 - pe), abs=1e-12)
    assert round(k, 3) == 0.210


def test_fleiss_unanimous():
    assert fleiss_kappa([("t", "t", "t")] * 5) == 1.0
    assert fleiss_kappa([("t", "t"), ("f", "f"), ("u", "u")]) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5).flatmap(
    lambda n: st.lists(st.lists(st.sampled_from("abc"), min_size=n, max_size=n), min_size=2, max_size=12)))
def test_fleiss_matches_pair_oracle(matrix):
    flat = {x for r in matrix for x in r}
    if len(flat) < 2:
        assert fleiss_kappa(matrix) == 1.0
    else:
        assert fleiss_kappa(matrix) == pytest.approx(fleiss_by_pairs(matrix), abs=1e-9)


def test_fleiss_rejects_ragged_and_single_rater():
    with pytest.raises(MetricsError):
        fleiss_kappa([("a", "b"), ("a",)])
    with pytest.raises(MetricsError):
        fleiss_kappa([("a",), ("b",)])
    with pytest.raises(MetricsError):
        fleiss_kappa([])


def test_rating_counts_with_label_order():
    np.testing.assert_array_equal(rating_counts([("b", "a")], labels=["a", "b", "c"]), [[1, 1, 0]])
    with pytest.raises(MetricsError):
        rating_counts([("z",)], labels=["a"])


def test_macro_f1_hand_computed():
    # a: tp1 fp1 fn0 -> 2/3; b: tp1 fp0 fn1 -> 2/3; c: 1
    assert macro_f1(["a", "a", "b", "c"], ["a", "b", "b", "c"]) == pytest.approx(7 / 9, abs=1e-9)


def test_macro_f1_constant_classifier_balanced():
    golds = ["true", "false", "unverified"] * 4
    preds = ["true"] * 12
    # F1(true) = 2*4 / (2*4 + 8) = 1/2, others 0
    assert macro_f1(preds, golds, ["true", "false", "unverified"]) == pytest.approx(1 / 6, abs=1e-9)


def test_macro_f1_skips_absent_class():
    assert macro_f1(["a", "b"], ["a", "b"], labels=["a", "b", "c"]) == 1.0


def test_macro_f1_errors():
    with pytest.raises(MetricsError):
        macro_f1(["a"], [])
    with pytest.raises(MetricsError):
        macro_f1([], [])


def test_pairwise_agreement():
    a = ["A", "B", "C", "D"]
    assert pairwise_agreement(a, a) == 100.0
    assert pairwise_agreement(a, ["A", "B", "D", "C"]) == 50.0
    with pytest.raises(MetricsError):
        pairwise_agreement(a, a[:2])


def test_confusion_matrix_orientation():
    m = confusion_matrix(["x", "x", "y"], ["x", "y", "y"], ["x", "y"])
    np.testing.assert_array_equal(m, [[1, 1], [0, 1]])
    assert m.sum() == 3


def test_report_rows_sum_to_100_and_follow_order():
    grouped = {
        "Similar Response": ["faithful", "unfaithful", "uninformative"],
        "Important Response (IG)": ["faithful", "faithful", None, "uninformative"],
        "Out-of-domain Summary": [None, None],
    }
    rep = build_eval_report(grouped)
    assert [r.kind for r in rep.rows] == ["Important Response (IG)", "Similar Response"]
    assert rep.excluded == 3 and any("Out-of-domain" in n for n in rep.notes)
    for r in rep.rows:
        assert sum(r.percentages.values()) == pytest.approx(100.0, abs=0.01)
    assert rep.rows[0].percentages["faithful"] == pytest.approx(200 / 3)
    d = json.loads(rep.to_json())
    assert d["schema_version"] == 1 and d["rows"][0]["counts"]["faithful"] == 2
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["schema_version", "kind", "n", *CATEGORIES]
    assert len(rows) == 3


def test_report_rejects_unknown_category():
    with pytest.raises(MetricsError):
        build_eval_report({"Similar Response": ["great"]})


def test_report_row_labels_cover_every_kind():
    assert len(REPORT_ROWS) == 10 and len(set(REPORT_ROWS)) == 10

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rvexplain import diffcore as dc
from rvexplain.attribution import (IG, SV, AttributionError, AttributionResult, completeness_gap,
                                   important_set, integrated_gradients, mean_shares, select_topk,
                                   shapley_exact, shapley_sampling)
from rvexplain.ingest import VeracityLabel, build_thread

from conftest import make_thread
from oracles import shapley_by_orderings


def linear_model(we, ws):
    """Logits = sum over posts of (emb @ we + stance @ ws)."""
    def fn(emb, stance):
        per_post = dc.add(dc.matmul(emb, dc.const(we)), dc.matmul(stance, dc.const(ws)))
        return dc.mean_rows_over_index_sets(dc.scale(per_post, float(emb.shape[0])), [list(range(emb.shape[0]))])
    return fn


@pytest.mark.parametrize("steps", [1, 3, 64])
def test_ig_is_exact_on_linear_models(steps):
    rng = np.random.default_rng(steps)
    t = make_thread(4, seed=steps)
    we, ws = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
    base = rng.normal(size=t.embeddings.shape)
    r = integrated_gradients(linear_model(we, ws), t, target=2, steps=steps, baseline=base)
    expected = np.hstack([(t.embeddings - base) * we[:, 2], t.stance * ws[:, 2]])
    np.testing.assert_allclose(r.per_feature, expected, rtol=0, atol=1e-12)
    assert r.target_class is VeracityLabel.UNVERIFIED


def test_post_scores_are_row_sums(small_model):
    r = integrated_gradients(small_model, make_thread(6, seed=1), steps=16)
    assert np.array_equal(r.post_scores, r.per_feature.sum(axis=1))
    assert r.per_feature.shape == (6, 10) and r.method == IG


def test_ig_completeness_untrained(small_model):
    t = make_thread(5, seed=2)
    r = integrated_gradients(small_model, t, steps=512)
    gap, delta = completeness_gap(small_model, t, r)
    assert gap <= 1e-3 * delta + 1e-6


def test_ig_completeness_trained(trained, separable):
    for t in separable[:5]:
        r = integrated_gradients(trained.params, t, steps=512)
        gap, delta = completeness_gap(trained.params, t, r)
        assert gap <= 1e-3 * delta + 1e-6, t.thread_id


def test_ig_default_target_is_prediction(small_model):
    from rvexplain.verifier import predict

    t = make_thread(4, seed=5)
    assert integrated_gradients(small_model, t, steps=4).target_class is predict(small_model, t)[0]


def test_ig_rejects_bad_inputs(small_model):
    t = make_thread(4)
    with pytest.raises(AttributionError):
        integrated_gradients(small_model, t, steps=0)
    with pytest.raises(AttributionError, match="baseline"):
        integrated_gradients(small_model, t, baseline=np.zeros((2, 6)))
    bare = build_thread("x", "ev", [{"id": "s", "text": "claim"}], "s")
    with pytest.raises(AttributionError, match="features"):
        integrated_gradients(small_model, bare)


def additive_game(w):
    return lambda mask: float(sum(w[i] for i in range(len(w)) if mask >> i & 1))


def test_exact_shapley_additive_game():
    w = np.array([0.5, -1.0, 2.0, 0.0])
    r = shapley_exact(None, make_thread(4), target=0, value=additive_game(w))
    np.testing.assert_allclose(r.post_scores, w, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_exact_shapley_matches_ordering_oracle(n, seed):
    table = np.random.default_rng(seed).normal(size=1 << n)
    value = lambda m: float(table[m])
    r = shapley_exact(None, make_thread(n), target=0, value=value)
    np.testing.assert_allclose(r.post_scores, shapley_by_orderings(value, n), atol=1e-12)
    assert r.post_scores.sum() == pytest.approx(table[-1] - table[0], abs=1e-12)


def test_exact_shapley_axioms_on_model(small_model):
    t = make_thread(7, seed=8)
    r = shapley_exact(small_model, t)
    from rvexplain.attribution import _game

    v, _ = _game(small_model, t, r.target_class)
    assert r.post_scores.sum() == pytest.approx(v((1 << t.size) - 1) - v(0), abs=1e-9)


def test_exact_shapley_symmetry_of_duplicate_posts(small_model):
    t = make_thread(6, parents=[None, 0, 1, 1, 0, 4], seed=3)
    # posts p2 and p3 are sibling leaves under p1; give them identical features
    i, j = t.index_of("p2"), t.index_of("p3")
    t.embeddings[j] = t.embeddings[i]
    t.stance[j] = t.stance[i]
    r = shapley_exact(small_model, t)
    assert abs(r.post_scores[i] - r.post_scores[j]) <= 1e-9


def test_exact_shapley_refuses_large_threads():
    with pytest.raises(AttributionError, match="refused"):
        shapley_exact(None, make_thread(13), value=lambda m: 0.0)


def test_sampling_matches_exact_on_additive_game():
    w = np.linspace(-1, 1, 6)
    r = shapley_sampling(None, make_thread(6), target=0, permutations=3, value=additive_game(w))
    # every ordering gives each player exactly its weight
    np.testing.assert_allclose(r.post_scores, w, atol=1e-12)


def test_sampling_is_seeded(small_model):
    t = make_thread(6, seed=9)
    a = shapley_sampling(small_model, t, permutations=50, seed=4)
    b = shapley_sampling(small_model, t, permutations=50, seed=4)
    assert a.post_scores.tobytes() == b.post_scores.tobytes()
    assert a.meta["evaluations"] <= 1 << t.size
    assert a.method == SV


def test_sampling_efficiency_holds_per_permutation(small_model):
    t = make_thread(5, seed=10)
    r = shapley_sampling(small_model, t, permutations=7, seed=1)
    ex = shapley_exact(small_model, t)
    assert r.post_scores.sum() == pytest.approx(ex.post_scores.sum(), abs=1e-9)


def test_important_set_and_topk():
    scores = [0.1, -0.5, 0.4, 0.0, 0.3, 0.2]
    assert important_set(scores) == [2, 4, 5, 0]
    s25 = select_topk(scores, 25)
    s50 = select_topk(scores, 50)
    s100 = select_topk(scores, 100)
    assert s25.members == [2]
    assert s50.members == [2, 4]
    assert s100.members == [2, 4, 5, 0] and s100.cumulative_share == 1.0
    assert s25.cumulative_share == pytest.approx(0.4)
    assert s50.cumulative_share == pytest.approx(0.7)


def test_topk_ceiling():
    scores = [1.0] * 7
    assert len(select_topk(scores, 25).members) == 2  # ceil(1.75)
    assert len(select_topk([1.0] * 4, 25).members) == 1  # exactly one, not two


def test_topk_empty_important_set():
    sel = select_topk([-1.0, 0.0], 50)
    assert sel.members == [] and sel.cumulative_share == 0.0
    with pytest.raises(AttributionError):
        select_topk([1.0], 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=30))
def test_nesting_and_monotone_share(scores):
    sels = [select_topk(scores, k) for k in (25, 50, 100)]
    assert set(sels[0].members) <= set(sels[1].members) <= set(sels[2].members)
    assert sels[2].members == important_set(scores)
    shares = [s.cumulative_share for s in sels]
    assert shares[0] <= shares[1] + 1e-12 and shares[1] <= shares[2] + 1e-12


def test_mean_shares():
    rs = [AttributionResult(IG, np.array(s), VeracityLabel.TRUE) for s in ([3.0, 1.0], [1.0, 1.0, 1.0, 1.0])]
    assert mean_shares(rs, ks=(50,))[50] == pytest.approx((0.75 + 0.5) / 2)


def test_result_round_trip(small_model):
    r = integrated_gradients(small_model, make_thread(4), steps=8)
    back = AttributionResult.from_dict(json.loads(json.dumps(r.to_dict(include_features=True))))
    assert back.post_scores.tobytes() == r.post_scores.tobytes()
    assert back.per_feature.tobytes() == r.per_feature.tobytes()
    assert back.target_class is r.target_class and back.post_ids == r.post_ids
    with pytest.raises(AttributionError):
        AttributionResult.from_dict({**r.to_dict(), "format_version": 0})

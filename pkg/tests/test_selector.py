import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h2t import selector as sel
from h2t.errors import NumericError, SelectionError


def sort_oracle(s, k):
    """Full-sort reference: top-k by score, ties to the lower index."""
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return set(order[:k])


class TestRelevanceScores:
    def test_rows(self):
        scores = sel.relevance_scores(np.array([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(scores.s, [5.0, 0.0])

    def test_identical_rows_equal_scores(self):
        w = np.tile([[1.0, 2.0, 2.0]], (5, 1))
        scores = sel.relevance_scores(w)
        assert len(set(scores.s.tolist())) == 1

    def test_matches_per_row_oracle(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(7, 3))
        scores = sel.relevance_scores(w)
        for i in range(7):
            expected = np.sqrt(sum(w[i, j] ** 2 for j in range(3)))
            assert abs(scores.s[i] - expected) < 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            sel.relevance_scores(np.array([[np.nan, 1.0]]))

    @given(st.floats(0.0, 10.0), st.integers(0, 100))
    @settings(max_examples=30, deadline=None)
    def test_scale_equivariance(self, alpha, seed):
        w = np.random.default_rng(seed).normal(size=(6, 4))
        base = sel.relevance_scores(w).s
        scaled = sel.relevance_scores(alpha * w).s
        np.testing.assert_allclose(scaled, alpha * base, rtol=1e-9, atol=1e-12)


class TestSelectFraction:
    def test_full_fraction_keeps_all(self):
        out = sel.select_fraction(np.array([0.5, 0.1, 0.9]), 1.0)
        assert out.bitmap.all()
        assert out.k == 3

    def test_third(self):
        out = sel.select_fraction(np.array([0.1, 0.9, 0.5]), 1 / 3)
        assert out.indices().tolist() == [1]

    def test_floor_of_one(self):
        out = sel.select_fraction(np.array([0.1, 0.9, 0.5]), 0.0001)
        assert out.k == 1

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(1)
        s = rng.uniform(size=200)
        for f in (0.005, 0.1, 0.33, 0.77):
            out = sel.select_fraction(s, f)
            assert set(out.indices().tolist()) == sort_oracle(s, out.k)

    def test_tie_break_lower_index(self):
        out = sel.select_fraction(np.array([0.5, 0.5, 0.5]), 1 / 3)
        assert out.indices().tolist() == [0]

    def test_fraction_range(self):
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(SelectionError):
                sel.select_fraction(np.ones(4), bad)

    @given(st.integers(0, 500), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_monotone_nesting(self, seed, f1, f2):
        lo, hi = sorted((f1, f2))
        s = np.random.default_rng(seed).uniform(size=37)
        kept_lo = set(sel.select_fraction(s, lo).indices().tolist())
        kept_hi = set(sel.select_fraction(s, hi).indices().tolist())
        assert kept_lo <= kept_hi

    @given(st.integers(0, 200), st.floats(0.1, 10.0))
    @settings(max_examples=30, deadline=None)
    def test_invariant_under_positive_scaling(self, seed, alpha):
        s = np.random.default_rng(seed).uniform(size=23)
        a = sel.select_fraction(s, 0.3).bitmap
        b = sel.select_fraction(alpha * s, 0.3).bitmap
        np.testing.assert_array_equal(a, b)


class TestLayerwise:
    def test_single_layer_mean(self):
        scores = sel.layerwise_scores(np.array([1.0, 3.0]), {"a": (0, 2)})
        assert scores == {"a": 2.0}

    def test_two_layers_and_selection(self):
        s = np.array([0.0, 0.0, 2.0, 2.0])
        spans = {"a": (0, 2), "b": (2, 4)}
        scores = sel.layerwise_scores(s, spans)
        assert scores == {"a": 0.0, "b": 2.0}
        out = sel.select_layerwise(scores, spans, budget=2)
        assert out.indices().tolist() == [2, 3]

    def test_means_match_span_iteration(self):
        rng = np.random.default_rng(2)
        s = rng.uniform(size=20)
        spans = {"a": (0, 7), "b": (7, 12), "c": (12, 20)}
        scores = sel.layerwise_scores(s, spans)
        for name, (lo, hi) in spans.items():
            manual = sum(s[i] for i in range(lo, hi)) / (hi - lo)
            assert abs(scores[name] - manual) < 1e-12

    def test_budget_equals_total_keeps_all(self):
        spans = {"a": (0, 3), "b": (3, 5)}
        out = sel.select_layerwise({"a": 1.0, "b": 0.5}, spans, budget=5)
        assert out.bitmap.all()

    def test_stops_at_first_non_fitting_layer(self):
        spans = {"a": (0, 10), "b": (10, 20)}
        out = sel.select_layerwise({"a": 1.0, "b": 0.5}, spans, budget=10)
        assert out.k == 10
        assert out.bitmap[:10].all() and not out.bitmap[10:].any()

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(3)
        sizes = [4, 6, 3, 7]
        spans = {}
        lo = 0
        for i, size in enumerate(sizes):
            spans[f"l{i}"] = (lo, lo + size)
            lo += size
        scores = {f"l{i}": float(rng.uniform()) for i in range(4)}
        budget = 11
        out = sel.select_layerwise(scores, spans, budget)
        # greedy reference: sort by (score desc, span order), stop at first overflow
        order = sorted(scores, key=lambda n: (-scores[n], spans[n][0]))
        kept = []
        used = 0
        for name in order:
            size = spans[name][1] - spans[name][0]
            if used + size > budget:
                break
            kept.extend(range(*spans[name]))
            used += size
        assert out.indices().tolist() == sorted(kept)

    def test_budget_below_min_layer_rejected(self):
        with pytest.raises(SelectionError):
            sel.select_layerwise({"a": 1.0}, {"a": (0, 5)}, budget=4)

    def test_group_norms(self):
        w = np.array([[3.0, 0.0], [4.0, 0.0], [0.0, 1.0]])
        norms = sel.group_norms(w, {"a": (0, 2), "b": (2, 3)})
        assert norms["a"] == pytest.approx(5.0)
        assert norms["b"] == pytest.approx(1.0)


class TestOffsetWindow:
    def test_offset_zero_equals_topk(self):
        rng = np.random.default_rng(4)
        s = rng.uniform(size=50)
        win = sel.select_offset_window(s, 10, 0)
        top = sel.select_fraction(s, 10 / 50)
        np.testing.assert_array_equal(win.bitmap, top.bitmap)

    def test_last_offset_keeps_bottom(self):
        s = np.arange(10, dtype=float)
        out = sel.select_offset_window(s, 3, 7)
        assert set(out.indices().tolist()) == {0, 1, 2}

    def test_matches_rank_oracle(self):
        rng = np.random.default_rng(5)
        s = rng.uniform(size=40)
        order = sorted(range(40), key=lambda i: (-s[i], i))
        out = sel.select_offset_window(s, 8, 13)
        assert set(out.indices().tolist()) == set(order[13:21])

    def test_out_of_range_rejected(self):
        with pytest.raises(SelectionError):
            sel.select_offset_window(np.ones(10), 5, 6)


class TestSerialization:
    def test_roundtrip(self):
        rng = np.random.default_rng(6)
        s = rng.uniform(size=77)
        out = sel.select_fraction(s, 0.2)
        back = sel.deserialize_selection(sel.serialize_selection(out))
        np.testing.assert_array_equal(back.bitmap, out.bitmap)
        assert back.k == out.k
        assert back.strategy == out.strategy
        assert back.fraction == pytest.approx(0.2)

    def test_layerwise_roundtrip_no_fraction(self):
        out = sel.select_layerwise({"a": 1.0}, {"a": (0, 5)}, budget=5)
        back = sel.deserialize_selection(sel.serialize_selection(out))
        assert back.fraction is None
        assert back.strategy == sel.STRATEGY_LAYERWISE

    def test_truncated_rejected(self):
        out = sel.select_fraction(np.ones(9), 0.5)
        blob = sel.serialize_selection(out)
        with pytest.raises(SelectionError):
            sel.deserialize_selection(blob[:10])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsm.featsel import (FeatureReport, collinearity_screen, pearson_matrix, select_features,
                          shap_importance, zone_feature_select)
from mhsm.trees import GbtHyperparams, ShapAttribution


class TestPearson:
    @pytest.mark.parametrize("b, r", [([2, 4, 6], 1.0), ([6, 4, 2], -1.0), ([1, 3, 2], 0.5)])
    def test_hand_cases(self, b, r):
        m, _ = pearson_matrix(np.column_stack([[1, 2, 3], b]))
        assert m[0, 1] == pytest.approx(r, abs=1e-15)
        assert m[0, 0] == m[1, 1] == 1.0

    def test_constant_column_flagged(self):
        m, const = pearson_matrix(np.array([[1, 5], [2, 5], [3, 5]]))
        assert const.tolist() == [False, True] and m[0, 1] == 0.0 and m[1, 1] == 1.0

    def test_matches_numpy(self):
        X = np.random.default_rng(42).normal(size=(50, 4))
        m, _ = pearson_matrix(X)
        np.testing.assert_allclose(m, np.corrcoef(X.T), atol=1e-12)


def _equicorrelated(k, rho):
    r = np.full((k, k), rho)
    np.fill_diagonal(r, 1.0)
    return r


class TestScreen:
    def test_nothing_over_threshold(self):
        kept, dropped = collinearity_screen(_equicorrelated(4, 0.3))
        assert kept == [0, 1, 2, 3] and dropped == []

    def test_identical_pair(self):
        kept, dropped = collinearity_screen(_equicorrelated(2, 1.0))
        assert len(kept) == 1 and len(dropped) == 1

    def test_three_at_point_nine(self):
        r = _equicorrelated(4, 0.9)
        r[3, :3] = r[:3, 3] = 0.1
        kept, dropped = collinearity_screen(r)
        assert len(dropped) == 2 and 3 in kept

    def test_survivor_has_smallest_mean(self):
        r = _equicorrelated(3, 0.9)
        r[0, 1] = r[1, 0] = 0.95
        r[2, :] = r[:, 2] = [0.85, 0.82, 1.0]
        kept, dropped = collinearity_screen(r)
        # 0 leaves first (mean |r| 0.90 vs 0.885), then the 1-2 tie drops the later column
        assert dropped == [0, 2] and kept == [1]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 10_000), st.floats(0.3, 0.95))
    def test_no_pair_exceeds_threshold(self, p, seed, thr):
        rng = np.random.default_rng(seed)
        base = rng.normal(size=(40, 1))
        X = base + rng.uniform(0.05, 2.0, size=p) * rng.normal(size=(40, p))
        r, _ = pearson_matrix(X)
        kept, dropped = collinearity_screen(r, thr)
        sub = np.abs(r[np.ix_(kept, kept)])
        np.fill_diagonal(sub, 0.0)
        assert sub.max(initial=0.0) <= thr
        assert sorted(kept + dropped) == list(range(p))


class TestImportance:
    def test_all_zero_flagged(self):
        I, P, flag = shap_importance(np.zeros((5, 3)))
        assert flag and np.all(I == 0) and np.all(P == 0)

    def test_single_feature(self):
        phi = np.zeros((4, 3))
        phi[:, 1] = [1, -1, 1, -1]
        _, P, flag = shap_importance(ShapAttribution(0.0, phi))
        assert not flag and P.tolist() == [0.0, 100.0, 0.0]

    def test_seventy_five_twenty_five(self):
        phi = np.array([[3.0, 1.0], [-3.0, -1.0]])
        _, P, _ = shap_importance(phi)
        np.testing.assert_allclose(P, [75.0, 25.0], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_sums_to_hundred(self, p, seed):
        _, P, _ = shap_importance(np.random.default_rng(seed).normal(size=(20, p)))
        assert abs(P.sum() - 100.0) <= 1e-9


class TestRetention:
    @pytest.mark.parametrize("pf, pl, kept", [(0.0, 5.0, True), (0.0, 0.0, False), (3.0, 0.0, True)])
    def test_rule(self, pf, pl, kept):
        assert zone_feature_select([pf], [pl], ["a"]) == (["a"] if kept else [])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=1, max_size=6),
           st.integers(0, 5), st.floats(0.1, 10))
    def test_monotone(self, ps, idx, bump):
        names = [f"f{i}" for i in range(len(ps))]
        pf = [a for a, _ in ps]
        pl = [b for _, b in ps]
        before = set(zone_feature_select(pf, pl, names))
        pf[idx % len(ps)] += bump
        assert before <= set(zone_feature_select(pf, pl, names))

    def test_zones_can_differ(self):
        names = ["a", "b", "c"]
        z1 = zone_feature_select([10, 0, 5], [0, 0, 5], names)
        z2 = zone_feature_select([10, 4, 0], [0, 0, 0], names)
        assert z1 != z2


class TestSelectFeatures:
    def test_noise_column_and_duplicate(self):
        rng = np.random.default_rng(42)
        n = 300
        a = rng.normal(size=n)
        X = np.column_stack([a, a * 2 + 1e-3 * rng.normal(size=n), rng.normal(size=n), np.zeros(n)])
        y = np.column_stack([(a + 0.3 * rng.normal(size=n) > 0), (X[:, 2] > 0)]).astype(int)
        rep = select_features(X, y, ["a", "a2", "b", "const"], hyper=GbtHyperparams(n_trees=20, max_depth=2))
        assert len(rep.dropped_collinear) == 1 and rep.constant == ["const"]
        assert "const" not in rep.screened
        for hz in ("flood", "landslide"):
            assert sum(rep.importance_pct[hz].values()) == pytest.approx(100.0, abs=1e-9)
        assert set(rep.retained) <= set(rep.screened)
        assert FeatureReport.from_dict(rep.to_dict()).retained == rep.retained

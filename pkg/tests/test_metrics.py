import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsm.errors import DegenerateInputError, ValidationError
from mhsm.gridio import Raster
from mhsm.metrics import (auc_roc, brier, confusion_counts, confusion_metrics, high_mask, jaccard,
                          jaccard_high, macro_average, mh_density)
from oracles import trapezoid_auc


class TestConfusion:
    def test_hand_case(self):
        y = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        p = [0.9, 0.8, 0.7, 0.2, 0.6, 0.1, 0.1, 0.1, 0.1, 0.1]
        m = confusion_metrics(y, p)
        c = m.counts
        assert (c.TP, c.FP, c.FN, c.TN) == (3, 1, 1, 5)
        assert (m.precision, m.recall, m.f1, m.accuracy) == pytest.approx((0.75, 0.75, 0.75, 0.8))
        assert m.fpr == pytest.approx(1 / 6)

    def test_perfect(self):
        m = confusion_metrics([0, 1, 1], [0.1, 0.9, 0.7])
        assert (m.accuracy, m.precision, m.recall, m.f1, m.fpr) == (1.0, 1.0, 1.0, 1.0, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_f1_harmonic_identity(self, seed):
        rng = np.random.default_rng(seed)
        y, p = rng.integers(0, 2, 40), rng.uniform(size=40)
        m = confusion_metrics(y, p)
        if m.precision + m.recall > 0:
            assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-12)

    def test_threshold_is_inclusive(self):
        assert confusion_counts([1], [0.5]).TP == 1

    def test_no_predicted_positive(self):
        m = confusion_metrics([0, 1], [0.1, 0.2])
        assert m.precision == 0.0 and "precision" in m.undefined

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=1, max_size=60))
    def test_counts_partition(self, rows):
        y, p = zip(*rows)
        c = confusion_counts(y, p)
        assert c.N == len(rows)


class TestAuc:
    def test_perfect_and_reversed(self):
        assert auc_roc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
        assert auc_roc([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]) == 0.0

    def test_hand_case(self):
        assert auc_roc([0, 1, 1], [0.4, 0.3, 0.9]) == pytest.approx(0.5, abs=1e-15)

    def test_all_tied(self):
        assert auc_roc([0, 1, 0, 1], [0.5] * 4) == 0.5

    def test_single_class(self):
        with pytest.raises(DegenerateInputError):
            auc_roc([1, 1], [0.2, 0.3])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000), st.integers(2, 80), st.integers(2, 12))
    def test_matches_trapezoid(self, seed, n, levels):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        p = rng.integers(0, levels, size=n) / levels
        assert abs(auc_roc(y, p) - trapezoid_auc(y, p)) <= 1e-12


class TestBrier:
    def test_hand_case(self):
        assert brier([1, 0], [0.8, 0.2]) == pytest.approx(0.04, abs=1e-15)

    def test_half_everywhere(self):
        assert brier([0, 1, 1], [0.5] * 3) == 0.25

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000))
    def test_label_flip_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        y, p = rng.integers(0, 2, 30), rng.uniform(size=30)
        assert brier(y, p) == pytest.approx(brier(1 - y, 1 - p), abs=1e-15)

    def test_range_checked(self):
        with pytest.raises(ValidationError):
            brier([1], [1.2])


def _codes(values):
    return Raster(np.asarray(values, dtype=np.float64), 0, 0, 1)


class TestSpatial:
    def test_jaccard_half(self):
        assert jaccard([1, 1, 0, 0], [1, 0, 0, 0]).value == 0.5

    def test_jaccard_disjoint(self):
        assert jaccard([1, 0], [0, 1]).value == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(ValidationError):
            jaccard_high(_codes([[1.0]]), _codes([[1.0, 2.0]]))

    def test_density_four_cells(self):
        classes = _codes([[0.0, 6.0], [12.0, 18.0]])
        d = mh_density([[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]], classes)
        assert sorted(d[d > 0].tolist()) == [25.0] * 4

    def test_density_point_order(self):
        rng = np.random.default_rng(3)
        classes = _codes(rng.integers(0, 25, size=(5, 5)))
        xy = rng.uniform(0, 5, size=(200, 2))
        assert np.array_equal(mh_density(xy, classes), mh_density(xy[::-1], classes))

    def test_jaccard_both_empty(self):
        r = jaccard([0, 0], [0, 0])
        assert r.value == 1.0 and r.both_empty

    def test_high_mask_levels(self):
        codes = _codes(np.arange(25).reshape(5, 5))
        # flood class = row index here, landslide class = column index
        assert high_mask(codes, "flood")[:, 0].tolist() == [False, False, False, True, True]
        assert high_mask(codes, "landslide")[0].tolist() == [False, False, False, True, True]

    def test_jaccard_high_same_map(self):
        codes = _codes(np.arange(25).reshape(5, 5))
        res = jaccard_high(codes, codes)
        assert res["flood"].value == res["landslide"].value == 1.0

    def test_density_corner(self):
        classes = _codes([[24.0, 0.0]])
        d = mh_density([[0.5, 0.5], [0.5, 0.5], [1.5, 0.5], [9.0, 9.0]], classes)
        assert d[4, 4] == pytest.approx(200 / 3) and d[0, 0] == pytest.approx(100 / 3)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 300))
    def test_density_sums_to_hundred(self, seed, n):
        rng = np.random.default_rng(seed)
        classes = _codes(rng.integers(0, 25, size=(6, 6)))
        xy = rng.uniform(0, 6, size=(n, 2))
        assert abs(mh_density(xy, classes).sum() - 100.0) <= 1e-9

    def test_density_nodata_skipped(self):
        classes = _codes([[-9999.0, 3.0]])
        d = mh_density([[0.5, 0.5], [1.5, 0.5]], classes)
        assert d[0, 3] == 100.0


class TestMacro:
    def test_plain_mean(self):
        assert macro_average([0.8, 0.9]) == (pytest.approx(0.85), 0)

    def test_skips_undefined(self):
        assert macro_average([0.8, None, math.nan]) == (pytest.approx(0.8), 2)

    def test_all_undefined(self):
        mean, skipped = macro_average([None])
        assert math.isnan(mean) and skipped == 1

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from mhsm.errors import DegenerateInputError, ValidationError
from mhsm.geodetector import (betainc_regularized, categorical_stratify, classify_interaction,
                              detector_report, detector_suite, f_sf, factor_q, interaction_q, overlay,
                              quantile_stratify, risk_detect)
from mhsm.gridio import Raster
from oracles import anova_f, permutation_p, q_sum_of_squares


def _strata(labels):
    return categorical_stratify(np.asarray(labels))


class TestStratify:
    def test_one_to_ten(self):
        s = quantile_stratify(np.arange(1, 11), 5)
        assert s.L == 5 and s.labels.tolist() == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]

    def test_constant(self):
        s = quantile_stratify(np.full(8, 2.0))
        assert s.L == 1 and s.constant and np.all(s.labels == 0)

    def test_ties_collapse(self):
        s = quantile_stratify([0, 0, 0, 0, 0, 0, 0, 1, 2, 3])
        assert s.collapsed and s.L < 5
        assert sorted(set(s.labels.tolist())) == list(range(s.L))

    def test_categorical(self):
        s = categorical_stratify([3, 1, 3, 4])
        assert s.kind == "categorical" and s.L == 3 and s.codes == [1.0, 3.0, 4.0]

    def test_too_few(self):
        with pytest.raises(ValidationError):
            quantile_stratify([1, 2, 3], 5)


class TestFactorQ:
    @pytest.mark.parametrize("Y, labels, q", [
        ([1, 1, 5, 5], [0, 0, 1, 1], 1.0),
        ([1, 2, 3, 4], [0, 0, 0, 0], 0.0),
        ([1, 2, 3, 4], [0, 0, 1, 1], 0.8),
    ])
    def test_hand_cases(self, Y, labels, q):
        assert factor_q(Y, np.array(labels)).q == pytest.approx(q, abs=1e-15)

    def test_zero_variance(self):
        with pytest.raises(DegenerateInputError):
            factor_q([2, 2, 2], np.array([0, 1, 1]))

    def test_stratum_bookkeeping(self):
        r = factor_q([1, 2, 3, 4], np.array([0, 0, 1, 1]))
        assert r.N == 4 and sum(n for n, _, _ in r.strata) == 4
        assert r.strata[0] == (2, 1.5, 0.25)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 100_000), st.integers(4, 200), st.integers(1, 8))
    def test_forms_agree_and_bounded(self, seed, n, k):
        rng = np.random.default_rng(seed)
        Y = rng.normal(size=n)
        labels = rng.integers(0, k, size=n)
        q = factor_q(Y, labels).q
        assert abs(q - q_sum_of_squares(Y, labels)) <= 1e-10
        assert -1e-12 <= q <= 1 + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.floats(-50, 50).filter(lambda a: abs(a) > 1e-3), st.floats(-50, 50))
    def test_affine_invariance(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        Y = rng.normal(size=60)
        labels = rng.integers(0, 4, size=60)
        assert factor_q(scale * Y + shift, labels).q == pytest.approx(factor_q(Y, labels).q, abs=1e-9)


class TestInteraction:
    def test_identical_stratifications(self):
        s = _strata([0, 0, 1, 1, 2, 2])
        r = interaction_q([1.0, 2, 4, 3, 7, 9], s, s)
        assert r.q12 == pytest.approx(r.q1) and r.type == "uni-weaken"

    def test_independent_boundary(self):
        r = interaction_q([0.0, 1, 2, 3], _strata([0, 0, 1, 1]), _strata([0, 1, 0, 1]))
        assert (r.q1, r.q2, r.q12) == pytest.approx((0.8, 0.2, 1.0))
        assert r.type == "independent" and r.code == "I"

    @pytest.mark.parametrize("q1, q2, q12, kind", [
        (0.3, 0.4, 0.1, "nonlinear-weaken"),
        (0.3, 0.4, 0.35, "uni-weaken"),
        (0.3, 0.4, 0.3, "uni-weaken"),
        (0.3, 0.4, 0.5, "bi-enhance"),
        (0.3, 0.4, 0.7, "independent"),
        (0.3, 0.4, 0.7 + 5e-10, "independent"),
        (0.3, 0.4, 0.8, "nonlinear-enhance"),
    ])
    def test_rules(self, q1, q2, q12, kind):
        assert classify_interaction(q1, q2, q12) == kind

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000), st.integers(2, 5), st.integers(2, 5))
    def test_refinement_monotone(self, seed, k1, k2):
        rng = np.random.default_rng(seed)
        Y = rng.normal(size=80)
        s1, s2 = _strata(rng.integers(0, k1, 80)), _strata(rng.integers(0, k2, 80))
        r = interaction_q(Y, s1, s2)
        assert r.q12 >= max(r.q1, r.q2) - 1e-12

    def test_overlay_pairs(self):
        ov = overlay(_strata([0, 0, 1, 1]), _strata([0, 1, 0, 1]))
        assert len(set(ov.tolist())) == 4


class TestRisk:
    def test_equal_means(self):
        r = risk_detect([1.0, 3, 1, 3], np.array([0, 0, 1, 1]))
        assert r.F == 0.0 and r.p_value == 1.0

    def test_hand_anova(self):
        r = risk_detect([1.0, 2, 3, 4], np.array([0, 0, 1, 1]))
        assert r.F == pytest.approx(8.0, abs=1e-12)
        assert r.p_value == pytest.approx(0.1056, abs=1e-4)
        assert r.p_value == pytest.approx(2 * stats.t.sf(math.sqrt(8), 2), abs=1e-12)
        assert not r.significant

    def test_zero_within_variance(self):
        r = risk_detect([1.0, 1, 2, 2], np.array([0, 0, 1, 1]))
        assert r.F_infinite and r.p_value == 0.0 and r.significant

    def test_constant_everything(self):
        r = risk_detect([1.0, 1, 1, 1], np.array([0, 0, 1, 1]))
        assert r.F == 0 and r.p_value == 1.0

    def test_needs_two_per_stratum(self):
        with pytest.raises(ValidationError):
            risk_detect([1.0, 2, 3], np.array([0, 0, 1]))

    def test_matches_permutation_test(self):
        base = stats.norm.ppf((np.arange(1, 9) - 0.5) / 8)
        Y = np.concatenate([base, base + 0.5, base + 1.0])
        labels = np.repeat(np.arange(3), 8)
        r = risk_detect(Y, labels)
        assert r.F == pytest.approx(anova_f(Y, labels), rel=1e-12)
        assert abs(r.p_value - permutation_p(Y, labels, 10**6, seed=0)) < 0.01

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.3, 40), st.floats(0.3, 40))
    def test_incomplete_beta_matches_scipy(self, x, a, b):
        assert abs(betainc_regularized(a, b, x) - special.betainc(a, b, x)) < 1e-10

    @pytest.mark.parametrize("F, d1, d2", [(0.5, 3, 10), (8.0, 1, 2), (2.5, 4, 120), (30.0, 2, 5)])
    def test_f_tail(self, F, d1, d2):
        assert f_sf(F, d1, d2) == pytest.approx(stats.f.sf(F, d1, d2), abs=1e-10)


class TestReport:
    def test_monotone_map_ranks_factor_first(self):
        rng = np.random.default_rng(42)
        n = 5000
        fx = {"a": rng.normal(size=n), "b": rng.normal(size=n), "c": rng.normal(size=n)}
        Y = np.tanh(fx["b"])
        rep = detector_report(Y, fx, n_strata=5)
        assert rep["top"][0] == "b" and rep["q"]["b"] > 0.85
        assert rep["risk"]["factor"] == "b" and rep["risk"]["labels"] == ["VL", "L", "M", "H", "VH"]

    def test_noise_map(self):
        rng = np.random.default_rng(0)
        n = 10_000
        fx = {f"f{i}": rng.normal(size=n) for i in range(4)}
        rep = detector_report(rng.normal(size=n), fx)
        assert max(rep["q"].values()) <= 0.05

    def test_top_k_clamped(self):
        rng = np.random.default_rng(1)
        fx = {"a": rng.normal(size=50), "k": np.ones(50)}
        rep = detector_report(rng.normal(size=50), fx, top_k=5)
        # a constant factor forms one stratum and explains nothing
        assert rep["top"] == ["a", "k"] and rep["q"]["k"] == 0.0
        assert rep["strata"]["k"]["constant"] and list(rep["interactions"]) == ["a|k"]

    def test_suite_per_zone(self):
        rng = np.random.default_rng(2)
        zones = Raster(np.repeat([[1.0] * 10 + [2.0] * 10], 20, axis=0), 0, 0, 1)
        a = rng.normal(size=(20, 20))
        fx = {"a": Raster(a, 0, 0, 1), "b": Raster(rng.normal(size=(20, 20)), 0, 0, 1)}
        maps = {"flood": Raster(1 / (1 + np.exp(-a)), 0, 0, 1),
                "landslide": Raster(rng.uniform(size=(20, 20)), 0, 0, 1)}
        out = detector_suite(maps, fx, zones, top_k=2, seed=0)
        assert set(out) == {"1", "2"}
        assert out["1"]["flood"]["top"][0] == "a" and out["1"]["flood"]["n"] == 200

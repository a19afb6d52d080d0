import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import constant_bundle, factor_rasters, random_bundle
from mhsm.errors import ConfigurationError, DegenerateInputError, ValidationError
from mhsm.gridio import Raster
from mhsm.mosaic import (TilePrediction, ZoneModelBundle, classify_bivariate, fisher_jenks, idw_merge,
                         jenks_breaks, predict_bundle, predict_tiles, read_tiles, within_ssd, write_tiles)
from mhsm.partition import ComputationalUnit, Rect, attach_zone_ids, build_units
from oracles import brute_jenks

NAMES = ["a", "b", "c"]


def _zones(shape, value=1.0, cellsize=100.0):
    return Raster(np.full(shape, value), 0.0, 0.0, cellsize)


def _direct(bundle, factors, zones, model="moe", layer="s_f"):
    X = np.column_stack([factors[n].values.ravel() for n in bundle.features])
    return predict_bundle(bundle, X, (model,))[model][layer].reshape(zones.shape)


class TestBundle:
    def test_round_trip(self, tmp_path):
        b = random_bundle(1, NAMES)
        b.save(tmp_path / "b.json")
        back = ZoneModelBundle.load(tmp_path / "b.json")
        X = np.random.default_rng(0).normal(size=(10, 3))
        for m in ("ef", "lf", "moe"):
            for k, v in predict_bundle(b, X)[m].items():
                assert np.array_equal(predict_bundle(back, X)[m][k], v)

    def test_lf_only_bundle(self):
        b = random_bundle(1, NAMES)
        b.ef = None
        b.gate = None
        assert b.available() == ["lf"]
        with pytest.raises(ConfigurationError):
            predict_bundle(b, np.zeros((1, 3)), ("moe",))

    def test_moe_layers_come_from_ef(self):
        b = random_bundle(2, NAMES)
        out = predict_bundle(b, np.random.default_rng(1).normal(size=(20, 3)))
        assert np.array_equal(out["moe"]["rho"], out["ef"]["rho"])
        lo = np.minimum(out["ef"]["s_f"], out["lf"]["s_f"])
        hi = np.maximum(out["ef"]["s_f"], out["lf"]["s_f"])
        assert np.all((out["moe"]["s_f"] >= lo) & (out["moe"]["s_f"] <= hi))


class TestPredictTiles:
    def test_single_tile_equals_direct(self):
        fx = factor_rasters((20, 20), NAMES)
        zones = _zones((20, 20))
        units = build_units(Rect(0, 0, 2000, 2000), 2000, 0)
        b = random_bundle(1, NAMES)
        tiles = predict_tiles({1: b}, units, fx, zones)
        merged = idw_merge(tiles, units, zones)
        for m in ("ef", "lf", "moe"):
            assert np.array_equal(merged[m]["s_f"].values, _direct(b, fx, zones, m))

    def test_portions_use_own_features(self):
        fx = factor_rasters((10, 10), NAMES)
        z = np.ones((10, 10))
        z[:, 5:] = 2
        zones = Raster(z, 0, 0, 100.0)
        b1, b2 = random_bundle(1, ["a"], seed=1), random_bundle(2, ["b", "c"], seed=2)
        units = build_units(Rect(0, 0, 1000, 1000), 1000, 0)
        tile = predict_tiles({1: b1, 2: b2}, units, fx, zones)[0]
        left = predict_bundle(b1, fx["a"].values[:, :5].reshape(-1, 1), ("lf",))["lf"]["s_f"]
        right_X = np.column_stack([fx["b"].values[:, 5:].ravel(), fx["c"].values[:, 5:].ravel()])
        right = predict_bundle(b2, right_X, ("lf",))["lf"]["s_f"]
        assert np.array_equal(tile.layers["lf"]["s_f"][:, :5].ravel(), left)
        assert np.array_equal(tile.layers["lf"]["s_f"][:, 5:].ravel(), right)

    def test_order_independent(self):
        fx = factor_rasters((30, 30), NAMES)
        zones = _zones((30, 30))
        units = build_units(Rect(0, 0, 3000, 3000), 1000, 200)
        b = {1: random_bundle(1, NAMES)}
        a = predict_tiles(b, units, fx, zones)
        r = predict_tiles(b, units[::-1], fx, zones)
        for ta, tr in zip(a, r):
            assert ta.unit_id == tr.unit_id
            assert np.array_equal(ta.layers["moe"]["s_l"], tr.layers["moe"]["s_l"])

    def test_missing_bundle_names_zone(self):
        fx = factor_rasters((5, 5), NAMES)
        units = build_units(Rect(0, 0, 500, 500), 500, 0)
        with pytest.raises(ConfigurationError, match="zone 7"):
            predict_tiles({1: random_bundle(1, NAMES)}, units, fx, _zones((5, 5), 7.0))

    def test_nodata_outside_study_area(self):
        fx = factor_rasters((4, 4), NAMES)
        z = np.ones((4, 4))
        z[0, 0] = -9999
        units = build_units(Rect(0, 0, 400, 400), 400, 0)
        tile = predict_tiles({1: random_bundle(1, NAMES)}, units, fx, Raster(z, 0, 0, 100.0))[0]
        assert np.isnan(tile.layers["ef"]["rho"][0, 0]) and np.isfinite(tile.layers["ef"]["rho"][1, 1])

    def test_tile_files_round_trip(self, tmp_path):
        fx = factor_rasters((12, 12), NAMES)
        zones = _zones((12, 12))
        units = build_units(Rect(0, 0, 1200, 1200), 600, 100)
        tiles = predict_tiles({1: random_bundle(1, NAMES)}, units, fx, zones)
        write_tiles(tiles, zones, tmp_path)
        back = read_tiles(units, zones, tmp_path)
        for t, u in zip(tiles, back):
            assert (t.row0, t.col0) == (u.row0, u.col0)
            assert np.array_equal(t.layers["moe"]["s_f"], u.layers["moe"]["s_f"])


def _tile(unit_id, row0, col0, values):
    return TilePrediction(unit_id, row0, col0, {"lf": {"s_f": np.asarray(values, dtype=np.float64)}})


class TestIdwMerge:
    def test_single_contributor_passthrough(self):
        units = build_units(Rect(0, 0, 300, 100), 300, 0)
        grid = _zones((1, 3))
        out = idw_merge([_tile(0, 0, 0, [[0.1, 0.2, 0.3]])], units, grid)
        assert out["lf"]["s_f"].values.tolist() == [[0.1, 0.2, 0.3]]

    def test_equidistant_average(self):
        grid = _zones((1, 2))
        # both tiles cover both cells; each padded center is equidistant from the two cells
        u0 = ComputationalUnit(0, Rect(0, 0, 100, 100), Rect(0, 0, 200, 100))
        u1 = ComputationalUnit(1, Rect(100, 0, 200, 100), Rect(0, 0, 200, 100))
        out = idw_merge([_tile(0, 0, 0, [[0.2, 0.2]]), _tile(1, 0, 0, [[0.6, 0.6]])], [u0, u1], grid)
        np.testing.assert_allclose(out["lf"]["s_f"].values, [[0.4, 0.4]], atol=1e-15)

    def test_distance_weights(self):
        grid = Raster(np.zeros((1, 1)), 0, 0, 2.0)  # cell center (1, 1)
        # padded centers at distance 1000 and 2000 from the cell center
        u0 = ComputationalUnit(0, Rect(0, 0, 2, 2), Rect(1000, 0, 1002, 2))
        u1 = ComputationalUnit(1, Rect(0, 0, 2, 2), Rect(2000, 0, 2002, 2))
        a, b = 0.3, 0.9
        out = idw_merge([_tile(0, 0, 0, [[a]]), _tile(1, 0, 0, [[b]])], [u0, u1], grid)
        w1, w2 = 1 / (1000 ** 2 + 1e-6), 1 / (2000 ** 2 + 1e-6)
        assert out["lf"]["s_f"].values[0, 0] == pytest.approx((w1 * a + w2 * b) / (w1 + w2), abs=1e-15)
        assert out["lf"]["s_f"].values[0, 0] == pytest.approx((4 * a + b) / 5, abs=1e-12)

    def test_uncovered_is_nodata(self):
        units = build_units(Rect(0, 0, 200, 100), 200, 0)
        out = idw_merge([_tile(0, 0, 0, [[np.nan, 0.5]])], units, _zones((1, 2)))
        assert out["lf"]["s_f"].values[0, 0] == -9999

    def test_constant_predictor_seam_free(self):
        fx = factor_rasters((45, 45), NAMES)
        zones = _zones((45, 45))
        units = build_units(Rect(0, 0, 4500, 4500), 1500, 150)
        merged = idw_merge(predict_tiles({1: constant_bundle(1, NAMES)}, units, fx, zones), units, zones)
        for layers in merged.values():
            for r in layers.values():
                assert np.ptp(r.values) == 0.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_within_contributor_range(self, seed):
        fx = factor_rasters((24, 24), NAMES, seed=seed)
        zones = _zones((24, 24))
        units = attach_zone_ids(build_units(Rect(0, 0, 2400, 2400), 800, 200), zones)
        tiles = predict_tiles({1: random_bundle(1, NAMES, seed)}, units, fx, zones)
        merged = idw_merge(tiles, units, zones)["ef"]["rho"].values
        lo = np.full(zones.shape, np.inf)
        hi = np.full(zones.shape, -np.inf)
        for t in tiles:
            v = t.layers["ef"]["rho"]
            rs, cs = slice(t.row0, t.row0 + v.shape[0]), slice(t.col0, t.col0 + v.shape[1])
            lo[rs, cs] = np.minimum(lo[rs, cs], v)
            hi[rs, cs] = np.maximum(hi[rs, cs], v)
        assert np.all((merged >= lo) & (merged <= hi))


class TestJenks:
    def test_two_clusters(self):
        br = jenks_breaks([1, 2, 3, 10, 11, 12], k=2)
        assert br.thresholds == [10.0]

    def test_k_one(self):
        br = jenks_breaks([3.0, 1.0, 2.0], k=1)
        assert br.thresholds == []

    def test_too_few_distinct(self):
        with pytest.raises(DegenerateInputError):
            jenks_breaks([1, 1, 2, 2], k=3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10**6), st.integers(4, 12), st.integers(2, 4))
    def test_matches_exhaustive(self, seed, n, k):
        rng = np.random.default_rng(seed)
        x = np.round(rng.uniform(0, 10, size=n), 1)
        if len(np.unique(x)) < k:
            return
        br = jenks_breaks(x, k)
        thr, obj = brute_jenks(x, k)
        assert br.objective == pytest.approx(obj, abs=1e-9)
        assert br.thresholds == thr

    def test_beats_random_partitions(self):
        rng = np.random.default_rng(42)
        x = np.sort(rng.gamma(2.0, size=300))
        starts, obj = fisher_jenks(x, 5)
        for _ in range(1000):
            cuts = np.sort(rng.choice(np.arange(1, 300), 4, replace=False))
            assert obj <= within_ssd(x, cuts) + 1e-9

    def test_sample_cap_seeded(self):
        v = np.random.default_rng(0).uniform(size=30_000)
        a = jenks_breaks(v, 5, sample_cap=2000, seed=3)
        b = jenks_breaks(v, 5, sample_cap=2000, seed=3)
        assert a.thresholds == b.thresholds and a.n_values == 2000
        assert a.thresholds == sorted(a.thresholds)


class TestBivariate:
    BREAKS = [0.2, 0.4, 0.6, 0.8]

    def _rasters(self, f, l):
        return (Raster(np.asarray(f, dtype=float), 0, 0, 1), Raster(np.asarray(l, dtype=float), 0, 0, 1))

    def test_corner(self):
        sf, sl = self._rasters([[0.1]], [[0.9]])
        assert classify_bivariate(sf, sl, self.BREAKS, self.BREAKS).values[0, 0] == 4

    def test_threshold_goes_up(self):
        sf, sl = self._rasters([[0.4]], [[0.2]])
        assert classify_bivariate(sf, sl, self.BREAKS, self.BREAKS).values[0, 0] == 5 * 2 + 1

    def test_all_codes_once(self):
        levels = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
        f, l = np.meshgrid(levels, levels, indexing="ij")
        sf, sl = self._rasters(f, l)
        codes = classify_bivariate(sf, sl, self.BREAKS, self.BREAKS).values
        assert sorted(codes.ravel().tolist()) == list(range(25))

    def test_nodata_propagates(self):
        sf, sl = self._rasters([[0.5, -9999.0]], [[-9999.0, 0.5]])
        assert np.all(classify_bivariate(sf, sl, self.BREAKS, self.BREAKS).values == -9999)

    def test_wrong_break_count(self):
        sf, sl = self._rasters([[0.5]], [[0.5]])
        with pytest.raises(ValidationError):
            classify_bivariate(sf, sl, [0.5], self.BREAKS)

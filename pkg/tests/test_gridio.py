import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhsm.errors import DimensionError, ParseError, ValidationError
from mhsm.gridio import (Raster, SamplePoint, SampleTable, default_bivariate_palette, format_number,
                         read_ascii_grid, read_points_csv, read_ppm, render_class_ppm, write_ascii_grid,
                         write_points_csv)

HEADER = "ncols {c}\nnrows {r}\nxllcorner 0\nyllcorner 0\ncellsize 10\nNODATA_value -9999\n"


def _grid_file(tmp_path, text, name="g.asc"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestAsciiGrid:
    def test_minimal_grid(self, tmp_path):
        r = read_ascii_grid(_grid_file(tmp_path, HEADER.format(c=2, r=1) + "1 2\n"))
        assert r.shape == (1, 2)
        assert r.values.tolist() == [[1.0, 2.0]]

    def test_nodata_passthrough(self, tmp_path):
        r = read_ascii_grid(_grid_file(tmp_path, HEADER.format(c=2, r=1) + "-9999 3\n"))
        assert r.values[0, 0] == r.nodata
        assert r.valid.tolist() == [[False, True]]
        assert np.isnan(r.masked()[0, 0])

    def test_header_case_and_missing_nodata(self, tmp_path):
        text = "NCOLS 1\nNROWS 1\nXLLCORNER 5\nYLLCORNER 6\nCELLSIZE 2\n7\n"
        r = read_ascii_grid(_grid_file(tmp_path, text))
        assert (r.xll, r.yll, r.cellsize, r.nodata) == (5.0, 6.0, 2.0, -9999.0)

    def test_malformed_header_names_line(self, tmp_path):
        text = "ncols 2\nnrows x\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2\n"
        with pytest.raises(ParseError, match="line 2"):
            read_ascii_grid(_grid_file(tmp_path, text))

    def test_count_mismatch(self, tmp_path):
        with pytest.raises(DimensionError):
            read_ascii_grid(_grid_file(tmp_path, HEADER.format(c=2, r=2) + "1 2\n3\n"))

    def test_non_numeric_cell(self, tmp_path):
        with pytest.raises(ParseError):
            read_ascii_grid(_grid_file(tmp_path, HEADER.format(c=2, r=1) + "1 abc\n"))

    def test_single_zero_cell_written_as_zero(self, tmp_path):
        p = tmp_path / "z.asc"
        write_ascii_grid(Raster(np.zeros((1, 1)), 0, 0, 1), p)
        assert p.read_text().splitlines()[-1] == "0"

    def test_nodata_written_literally(self, tmp_path):
        p = tmp_path / "n.asc"
        write_ascii_grid(Raster(np.array([[-9999.0, 1.5]]), 0, 0, 1), p)
        assert p.read_text().splitlines()[-1] == "-9999 1.5"

    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(3)
        r = Raster(rng.normal(size=(3, 3)), 100.5, -20.25, 30.0)
        p = tmp_path / "rt.asc"
        write_ascii_grid(r, p)
        back = read_ascii_grid(p)
        assert np.max(np.abs(back.values - r.values)) == 0
        assert (back.xll, back.yll, back.cellsize) == (r.xll, r.yll, r.cellsize)
        write_ascii_grid(back, tmp_path / "rt2.asc")
        assert (tmp_path / "rt2.asc").read_bytes() == p.read_bytes()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=12))
    def test_format_number_round_trips(self, xs):
        for x in xs:
            assert float(format_number(x)) == x

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            Raster(np.array([[np.inf]]), 0, 0, 1)

    def test_bad_cellsize(self):
        with pytest.raises(ValidationError):
            Raster(np.ones((2, 2)), 0, 0, 0)


class TestRasterGeometry:
    def test_cell_centers_top_row_first(self):
        r = Raster(np.zeros((2, 3)), 0, 0, 10)
        xc, yc = r.cell_centers()
        assert xc.tolist() == [5, 15, 25]
        assert yc.tolist() == [15, 5]

    def test_index_of_floor_convention(self):
        r = Raster(np.arange(4.0).reshape(2, 2), 0, 0, 10)
        row, col, inside = r.index_of(np.array([10.0]), np.array([10.0]))
        # shared corner belongs to the east column and the north row
        assert (int(row[0]), int(col[0]), bool(inside[0])) == (0, 1, True)

    def test_sample_outside_is_nan(self):
        r = Raster(np.ones((2, 2)), 0, 0, 10)
        assert np.isnan(r.sample(np.array([-1.0]), np.array([5.0]))[0])

    def test_with_values_maps_nan_to_nodata(self):
        r = Raster(np.ones((1, 2)), 0, 0, 1)
        out = r.with_values(np.array([[np.nan, 2.0]]))
        assert out.values[0, 0] == -9999
        with pytest.raises(DimensionError):
            r.with_values(np.ones((2, 2)))


class TestPointTables:
    def test_single_row(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,y,flood,landslide\n0,0,1,0\n")
        pts = read_points_csv(p)
        assert len(pts) == 1 and pts[0].label_flood == 1 and pts[0].label_landslide == 0

    def test_feature_column(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,y,flood,landslide,slope\n0,0,1,0,12.5\n")
        assert read_points_csv(p)[0].features == {"slope": 12.5}

    @pytest.mark.parametrize("bad", ["2", "0.5", "yes"])
    def test_non_binary_label(self, tmp_path, bad):
        p = tmp_path / "p.csv"
        p.write_text(f"x,y,flood,landslide\n0,0,{bad},0\n")
        with pytest.raises(ValidationError):
            read_points_csv(p)

    def test_missing_xy(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,y,flood,landslide\n,0,1,0\n")
        with pytest.raises(ValidationError):
            read_points_csv(p)

    def test_missing_column(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("x,flood,landslide\n0,1,0\n")
        with pytest.raises(ValidationError):
            read_points_csv(p)

    def test_round_trip_random(self, tmp_path):
        rng = np.random.default_rng(0)
        pts = [SamplePoint(float(rng.uniform(0, 1e4)), float(rng.uniform(0, 1e4)),
                           int(rng.integers(2)), int(rng.integers(2)),
                           {"slope": float(rng.normal()), "twi": float(rng.normal())},
                           int(rng.integers(3)) if i % 3 else None)
               for i in range(10)]
        p = tmp_path / "rt.csv"
        write_points_csv(pts, p)
        assert read_points_csv(p) == pts

    def test_sample_table_round_trip(self):
        pts = [SamplePoint(1.0, 2.0, 1, 0, {"a": 3.0}, 2), SamplePoint(4.0, 5.0, 0, 1, {"a": 6.0})]
        t = SampleTable.from_points(pts)
        assert t.labels.tolist() == [[1, 0], [0, 1]]
        assert t.zone_ids.tolist() == [2, -1]
        assert t.to_points() == pts


class TestPpm:
    def test_all_nodata_white(self, tmp_path):
        r = Raster(np.full((2, 3), -9999.0), 0, 0, 1)
        render_class_ppm(r, default_bivariate_palette(), tmp_path / "a.ppm")
        img = read_ppm(tmp_path / "a.ppm")
        assert img.shape == (2, 3, 3) and np.all(img == 255)

    def test_single_code_zero(self, tmp_path):
        pal = default_bivariate_palette()
        render_class_ppm(Raster(np.zeros((1, 1)), 0, 0, 1), pal, tmp_path / "b.ppm")
        assert read_ppm(tmp_path / "b.ppm")[0, 0].tolist() == pal[0, 0].tolist()

    def test_full_palette_layout(self, tmp_path):
        pal = default_bivariate_palette()
        codes = np.arange(25.0).reshape(5, 5)
        render_class_ppm(Raster(codes, 0, 0, 1), pal, tmp_path / "c.ppm")
        assert np.array_equal(read_ppm(tmp_path / "c.ppm"), pal)

    @pytest.mark.parametrize("code", [25.0, -1.0, 2.5])
    def test_out_of_range(self, tmp_path, code):
        with pytest.raises(ValidationError):
            render_class_ppm(Raster(np.array([[code]]), 0, 0, 1), default_bivariate_palette(), tmp_path / "d.ppm")

import numpy as np
import pytest

from stochtse.errors import ParseError, ShapeError, ValidationError
from stochtse.grids import (
    TrafficGrid,
    equispaced_rows,
    export_grid,
    ingest_grid,
    make_normalizer,
    sample_collocation,
    sample_detectors,
)


def small_grid(n_x=21, n_t=40, seed=0):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(0.02, 0.4, (n_x, n_t))
    v = rng.uniform(1.0, 26.0, (n_x, n_t))
    return TrafficGrid(densities=rho, speeds=v, dx=30.0, dt=1.5)


class TestTrafficGrid:
    def test_zero_grid_is_valid(self):
        g = TrafficGrid(densities=np.zeros((2, 2)), speeds=np.zeros((2, 2)))
        assert g.n_x == g.n_t == 2

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            TrafficGrid(densities=np.zeros((3, 4)), speeds=np.zeros((4, 3)))

    def test_minimum_size(self):
        with pytest.raises(ShapeError):
            TrafficGrid(densities=np.zeros((1, 5)), speeds=np.zeros((1, 5)))

    def test_negative_speed_rejected(self):
        v = np.zeros((2, 2))
        v[0, 0] = -1.0
        with pytest.raises(ValidationError):
            TrafficGrid(densities=np.zeros((2, 2)), speeds=v)

    def test_nan_rejected(self):
        rho = np.zeros((2, 2))
        rho[1, 1] = np.nan
        with pytest.raises(ValidationError):
            TrafficGrid(densities=rho, speeds=np.zeros((2, 2)))

    def test_geometry(self):
        g = small_grid(n_x=11, n_t=21)
        assert g.length == 10 * 30.0
        assert g.duration == 20 * 1.5
        np.testing.assert_allclose(g.x_coords()[-1], g.length)
        np.testing.assert_allclose(g.flows(), g.densities * g.speeds)
        assert np.isfinite(g.flows()).all()


class TestDetectorSampling:
    def test_equispaced_21_4(self):
        assert equispaced_rows(21, 4) == [0, 7, 13, 20]

    def test_single_detector_degenerates_to_first_row(self):
        assert equispaced_rows(21, 1) == [0]

    def test_full_row_set_is_identity(self):
        for n_x in (5, 13, 21):
            assert equispaced_rows(n_x, n_x) == list(range(n_x))

    def test_observation_count(self):
        g = small_grid()
        for k in (1, 4, 10, 21):
            obs = sample_detectors(g, k=k)
            assert len(obs) == k * g.n_t

    def test_observations_coincide_with_grid_cells(self):
        g = small_grid(seed=5)
        obs = sample_detectors(g, k=10)
        xs = g.x_coords()
        for r in obs.detector_rows:
            sel = obs.x == xs[r]
            np.testing.assert_array_equal(obs.rho[sel], g.densities[r])
            np.testing.assert_array_equal(obs.v[sel], g.speeds[r])

    def test_k_out_of_range(self):
        g = small_grid(n_x=5)
        with pytest.raises(ValidationError):
            sample_detectors(g, k=6)

    def test_duplicate_explicit_rows(self):
        g = small_grid()
        with pytest.raises(ValidationError):
            sample_detectors(g, strategy="explicit-rows", rows=[2, 2, 5])

    def test_explicit_rows_kept_verbatim(self):
        g = small_grid()
        obs = sample_detectors(g, strategy="explicit-rows", rows=[3, 9, 17])
        assert obs.detector_rows == [3, 9, 17]


class TestCollocation:
    def test_deterministic_per_seed(self):
        g = small_grid()
        a = sample_collocation(g, 1, seed=42)
        b = sample_collocation(g, 1, seed=42)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.t, b.t)

    def test_all_points_inside_domain(self):
        g = small_grid()
        c = sample_collocation(g, 10000, seed=1)
        assert len(c) == 10000
        assert ((c.x >= g.x0) & (c.x <= g.x0 + g.length)).all()
        assert ((c.t >= g.t0) & (c.t <= g.t0 + g.duration)).all()

    def test_grid_scheme_exhaustive(self):
        g = small_grid(n_x=4, n_t=5)
        c = sample_collocation(g, 20, seed=0, scheme="grid")
        assert len(c) == 20
        xs, ts = np.meshgrid(g.x_coords(), g.t_coords(), indexing="ij")
        np.testing.assert_array_equal(np.sort(c.x + 1e6 * c.t), np.sort(xs.ravel() + 1e6 * ts.ravel()))

    def test_grid_scheme_over_capacity(self):
        g = small_grid(n_x=3, n_t=3)
        with pytest.raises(ValidationError):
            sample_collocation(g, 10, seed=0, scheme="grid")


class TestNormalization:
    def test_scales_from_grid(self):
        g = small_grid(seed=2)
        spec = make_normalizer(g)
        assert spec.x_scale == g.length
        assert spec.t_scale == g.duration
        assert spec.rho_scale == g.densities.max()
        assert spec.v_scale == g.speeds.max()
        xn, tn = spec.normalize_coords(g.x_coords(), g.t_coords())
        assert xn.min() >= 0 and xn.max() <= 1
        assert tn.min() >= 0 and tn.max() <= 1

    def test_zero_grid_fallback(self):
        g = TrafficGrid(densities=np.zeros((3, 3)), speeds=np.zeros((3, 3)))
        spec = make_normalizer(g)
        assert spec.rho_scale == 1.0
        assert spec.v_scale == 1.0

    def test_round_trip_identity(self):
        g = small_grid(seed=7)
        spec = make_normalizer(g)
        rng = np.random.default_rng(7)
        for _ in range(20):
            x, t = rng.uniform(0, g.length, 5), rng.uniform(0, g.duration, 5)
            rho, v = rng.uniform(0, 0.4, 5), rng.uniform(0, 26, 5)
            xn, tn = spec.normalize_coords(x, t)
            xb, tb = spec.denormalize_coords(xn, tn)
            np.testing.assert_allclose(xb, x, rtol=1e-12)
            np.testing.assert_allclose(tb, t, rtol=1e-12)
            rn, vn = spec.normalize_states(rho, v)
            rb, vb = spec.denormalize_states(rn, vn)
            np.testing.assert_allclose(rb, rho, rtol=1e-12)
            np.testing.assert_allclose(vb, v, rtol=1e-12)


class TestGridFile:
    def test_round_trip_bit_identical(self, tmp_path):
        g = small_grid(seed=9)
        path = tmp_path / "grid.csv"
        export_grid(g, path)
        back = ingest_grid(path)
        np.testing.assert_array_equal(back.densities, g.densities)
        np.testing.assert_array_equal(back.speeds, g.speeds)
        assert (back.dx, back.dt, back.x0, back.t0) == (g.dx, g.dt, g.x0, g.t0)

    def test_dx_cross_check(self, tmp_path):
        g = small_grid()
        path = tmp_path / "grid.csv"
        export_grid(g, path)
        ingest_grid(path, dx=30.0, dt=1.5)
        with pytest.raises(ShapeError):
            ingest_grid(path, dx=25.0)

    def test_malformed_row_names_line(self, tmp_path):
        g = small_grid(n_x=2, n_t=2)
        path = tmp_path / "grid.csv"
        export_grid(g, path)
        lines = path.read_text().splitlines()
        lines[5] = "1,0,not-a-number,3.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match="row 6"):
            ingest_grid(path)

    def test_negative_speed_rejected(self, tmp_path):
        g = small_grid(n_x=2, n_t=2)
        path = tmp_path / "grid.csv"
        export_grid(g, path)
        text = path.read_text().splitlines()
        text[3] = "0,0,0.1,-1.0"
        path.write_text("\n".join(text) + "\n")
        with pytest.raises(ValidationError):
            ingest_grid(path)

    def test_missing_cells_counted(self, tmp_path):
        g = small_grid(n_x=2, n_t=3)
        path = tmp_path / "grid.csv"
        export_grid(g, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(ValidationError, match="2 cells"):
            ingest_grid(path)

    def test_index_outside_header_shape(self, tmp_path):
        g = small_grid(n_x=2, n_t=2)
        path = tmp_path / "grid.csv"
        export_grid(g, path)
        lines = path.read_text().splitlines()
        lines[4] = "5,0,0.1,1.0"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ShapeError):
            ingest_grid(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "grid.csv"
        path.write_text("wrong,header\n1,2\nx\n")
        with pytest.raises(ParseError, match="row 1"):
            ingest_grid(path)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlsm.datasets import (
    DatasetError,
    LabeledDataset,
    MoonConfig,
    generate_moons,
    load_csv,
    save_csv,
    subset_by_class,
)
from dlsm.oracle import ParzenOracle, kernel_log_density


class TestGenerateMoons:
    def test_contains_crescent_endpoint(self):
        ds = generate_moons(MoonConfig(samples_per_class=2000, noise_std=0.0, scale_factor=1.0,
                                       center=False, seed=1))
        upper = ds.points[ds.labels == 0]
        # with u ~ U[0, pi] the nearest draw to u = 0 is within ~pi/2000
        assert np.min(np.linalg.norm(upper - [1.0, 0.0], axis=1)) < 1e-2
        np.testing.assert_allclose(np.linalg.norm(upper, axis=1), 1.0, atol=1e-12)

    def test_lower_crescent_geometry(self):
        ds = generate_moons(MoonConfig(samples_per_class=50, noise_std=0.0, scale_factor=1.0,
                                       center=False))
        lower = ds.points[ds.labels == 1]
        np.testing.assert_allclose(np.linalg.norm(lower - [1.0, 0.5], axis=1), 1.0, atol=1e-12)
        assert np.all(lower[:, 1] <= 0.5 + 1e-12)

    def test_centered(self):
        ds = generate_moons(MoonConfig(seed=7))
        np.testing.assert_allclose(ds.points.mean(axis=0), 0.0, atol=1e-9)

    def test_scaling_is_a_multiple_of_unscaled(self):
        raw = generate_moons(MoonConfig(seed=5, scale_factor=1.0))
        scaled = generate_moons(MoonConfig(seed=5, scale_factor=20.0))
        np.testing.assert_allclose(scaled.points, 20.0 * raw.points, rtol=1e-14, atol=1e-12)
        assert np.isclose(np.abs(scaled.points).max(), 20.0 * np.abs(raw.points).max(), rtol=1e-14)

    def test_class_balance_and_labels(self):
        ds = generate_moons(MoonConfig(samples_per_class=37))
        np.testing.assert_array_equal(ds.class_sizes(), [37, 37])
        assert ds.class_count == 2

    def test_deterministic_in_seed(self):
        a = generate_moons(MoonConfig(seed=11))
        b = generate_moons(MoonConfig(seed=11))
        c = generate_moons(MoonConfig(seed=12))
        assert a.points.tobytes() == b.points.tobytes()
        assert not np.array_equal(a.points, c.points)

    @pytest.mark.parametrize("kwargs", [{"samples_per_class": 0}, {"noise_std": -0.1}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(DatasetError):
            MoonConfig(**kwargs)


class TestLabeledDataset:
    def test_label_out_of_range(self):
        with pytest.raises(DatasetError):
            LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)

    def test_non_finite_rejected(self):
        with pytest.raises(DatasetError):
            LabeledDataset(np.array([[0.0, np.nan]]), np.array([0]), 1)

    def test_empty_rejected(self):
        with pytest.raises(DatasetError):
            LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 1)


class TestCsv:
    def test_small_round_trip(self, tmp_path, tiny_dataset):
        save_csv(tiny_dataset, tmp_path / "d.csv")
        back = load_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(back.points, tiny_dataset.points)
        np.testing.assert_array_equal(back.labels, tiny_dataset.labels)

    def test_moon_round_trip_bit_identical(self, tmp_path):
        ds = generate_moons(MoonConfig(samples_per_class=1000, seed=9))
        save_csv(ds, tmp_path / "m.csv")
        back = load_csv(tmp_path / "m.csv")
        assert back.points.tobytes() == ds.points.tobytes()
        assert back.points.dtype == np.float64

    def test_header_and_line_endings(self, tmp_path, tiny_dataset):
        save_csv(tiny_dataset, tmp_path / "d.csv")
        raw = (tmp_path / "d.csv").read_bytes()
        assert raw.startswith(b"x0,x1,label\n")
        assert b"\r" not in raw

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("x0,x1,label\n0.5,0.5,0\n1.0,2.0,banana\n")
        with pytest.raises(DatasetError, match=r":3:"):
            load_csv(p)

    def test_label_at_or_above_class_count(self, tmp_path):
        p = tmp_path / "lab.csv"
        p.write_text("x0,label\n1.0,0\n2.0,3\n")
        with pytest.raises(DatasetError, match=r":3:"):
            load_csv(p, class_count=2)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2,
                    max_size=20))
    def test_round_trip_any_float(self, tmp_path_factory, values):
        n = len(values) // 2
        pts = np.array(values[: 2 * n], dtype=np.float64).reshape(n, 2)
        ds = LabeledDataset(pts, np.zeros(n, dtype=int), 1)
        path = tmp_path_factory.mktemp("rt") / "d.csv"
        save_csv(ds, path)
        assert load_csv(path).points.tobytes() == pts.tobytes()


class TestSubset:
    def test_sizes(self):
        ds = LabeledDataset(np.arange(16.0).reshape(8, 2), np.array([0, 1, 1, 0, 1, 1, 0, 1]), 2)
        sub = subset_by_class(ds, 0)
        assert len(sub) == 3
        assert sub.class_count == 2

    def test_union_is_partition(self, moons):
        parts = [subset_by_class(moons, c).points for c in range(moons.class_count)]
        joined = np.concatenate(parts)
        key = lambda a: a[np.lexsort(a.T[::-1])]  # noqa: E731
        np.testing.assert_array_equal(key(joined), key(moons.points))

    def test_empty_class(self):
        ds = LabeledDataset(np.zeros((2, 2)), np.array([0, 0]), 2)
        with pytest.raises(DatasetError):
            subset_by_class(ds, 1)

    def test_class_density_matches_restricted_sum(self, tiny_dataset, rng):
        sigma = 0.7
        oracle = ParzenOracle(tiny_dataset, sigma)
        x = rng.standard_normal(2)
        pts = tiny_dataset.points[tiny_dataset.labels == 1]
        manual = np.log(np.mean([np.exp(kernel_log_density(x, p, sigma)) for p in pts]))
        sub = ParzenOracle(subset_by_class(tiny_dataset, 1), sigma)
        assert np.isclose(sub.prior_log_density(x), manual, rtol=0, atol=1e-12)
        assert np.isclose(oracle.class_log_density(x, 1), manual, rtol=0, atol=1e-12)

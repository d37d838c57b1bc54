import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dlsm import autodiff as ad
from dlsm.datasets import DatasetError, LabeledDataset, subset_by_class
from dlsm.oracle import (
    ParzenOracle,
    RenormConfig,
    kernel_log_density,
    prior_log_density_tensor,
    renormalized_posterior_1d,
)

coords = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def _two_class(rng, n=50):
    pts = rng.normal(scale=5.0, size=(n, 2))
    return LabeledDataset(pts, np.arange(n) % 2, 2)


class TestKernel:
    def test_zero_distance(self):
        assert kernel_log_density([0.3, -1.0], [0.3, -1.0], 1.0) == pytest.approx(-np.log(2 * np.pi),
                                                                                  abs=1e-15)

    def test_unit_distance_1d(self):
        val = kernel_log_density([1.0], [0.0], 1.0)
        assert val == pytest.approx(-0.5 * np.log(2 * np.pi) - 0.5, abs=1e-15)

    def test_matches_direct_evaluation(self, rng):
        for _ in range(200):
            d = int(rng.integers(1, 4))
            sigma = float(rng.uniform(0.5, 3.0))
            a, b = rng.normal(size=d), rng.normal(size=d)
            direct = np.exp(-np.sum((a - b) ** 2) / (2 * sigma**2)) / (2 * np.pi * sigma**2) ** (d / 2)
            assert np.exp(kernel_log_density(a, b, sigma)) == pytest.approx(direct, rel=1e-12)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            kernel_log_density([0.0], [0.0], 0.0)

    def test_denoising_target_identity(self, rng):
        x, x_tilde, sigma = rng.normal(size=2), rng.normal(size=2), 0.8
        xt = ad.Tensor(x_tilde, requires_grad=True)
        logk = ad.scale(ad.sqnorm(ad.sub(xt, ad.Tensor(x))), -1 / (2 * sigma**2))
        (g,) = ad.grad(logk, [xt])
        np.testing.assert_allclose(g.data, (x - x_tilde) / sigma**2, rtol=0, atol=1e-15)


class TestPriorScore:
    def test_single_point_dataset(self):
        ds = LabeledDataset(np.array([[2.0, -1.0]]), np.array([0]), 1)
        o = ParzenOracle(ds, 0.5)
        x_tilde = np.array([0.5, 0.5])
        np.testing.assert_array_equal(o.prior_score(x_tilde), (ds.points[0] - x_tilde) / 0.25)

    def test_midpoint_of_symmetric_pair(self):
        ds = LabeledDataset(np.array([[-1.0, 2.0], [3.0, 0.0]]), np.array([0, 1]), 2)
        o = ParzenOracle(ds, 0.9)
        np.testing.assert_allclose(o.prior_score([1.0, 1.0]), 0.0, atol=1e-15)

    @pytest.mark.parametrize("sigma", [0.01, 0.3, 10.0])
    def test_equals_autodiff_gradient(self, rng, sigma):
        ds = _two_class(rng)
        o = ParzenOracle(ds, sigma)
        for _ in range(20):
            x = ds.points[rng.integers(len(ds))] + sigma * rng.normal(size=2)
            xt = ad.Tensor(x, requires_grad=True)
            (g,) = ad.grad(prior_log_density_tensor(ds.points, xt, sigma), [xt])
            np.testing.assert_allclose(o.prior_score(x), g.data, rtol=0, atol=1e-8)

    def test_far_away_point_no_underflow(self):
        ds = LabeledDataset(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0, 1]), 2)
        s = ParzenOracle(ds, 0.01).prior_score([500.0, 0.0])
        # the nearest point dominates completely
        np.testing.assert_allclose(s, (np.array([1.0, 0.0]) - [500.0, 0.0]) / 1e-4, rtol=1e-14)

    def test_batch_equals_single(self, rng):
        ds = _two_class(rng)
        o = ParzenOracle(ds, 0.4)
        xs = rng.normal(scale=4, size=(7, 2))
        batch = o.prior_score(xs)
        for x, row in zip(xs, batch):
            # BLAS may pick a different kernel for one row; allow a few ulp
            np.testing.assert_allclose(o.prior_score(x), row, rtol=1e-13, atol=1e-13)


class TestLogDensity:
    def test_single_point_at_point(self):
        ds = LabeledDataset(np.array([[1.0, 1.0]]), np.array([0]), 1)
        assert ParzenOracle(ds, 1.0).prior_log_density([1.0, 1.0]) == pytest.approx(-np.log(2 * np.pi))

    def test_duplicated_dataset_invariant(self, rng):
        ds = _two_class(rng, 20)
        dup = LabeledDataset(np.concatenate([ds.points, ds.points]),
                             np.concatenate([ds.labels, ds.labels]), 2)
        x = rng.normal(size=(5, 2))
        np.testing.assert_allclose(ParzenOracle(ds, 1.3).prior_log_density(x),
                                   ParzenOracle(dup, 1.3).prior_log_density(x), rtol=0, atol=1e-13)

    def test_mixture_identity(self, rng):
        ds = _two_class(rng, 40)
        o = ParzenOracle(ds, 2.0)
        x = rng.normal(scale=5, size=(10, 2))
        mix = sum(o.class_prior(c) * np.exp(o.class_log_density(x, c)) for c in range(2))
        np.testing.assert_allclose(mix, np.exp(o.prior_log_density(x)), rtol=1e-10)


class TestPosteriorAndLikelihood:
    def test_one_point_per_class(self):
        ds = LabeledDataset(np.array([[0.0, 0.0], [4.0, 1.0]]), np.array([0, 1]), 2)
        o = ParzenOracle(ds, 2.0)
        x = np.array([1.0, -1.0])
        np.testing.assert_array_equal(o.posterior_score(x, 1), (ds.points[1] - x) / 4.0)

    def test_single_class_posterior_is_prior(self, rng):
        ds = LabeledDataset(rng.normal(size=(10, 2)), np.zeros(10, dtype=int), 1)
        o = ParzenOracle(ds, 0.6)
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(o.posterior_score(x, 0), o.prior_score(x))
        np.testing.assert_array_equal(o.likelihood_score(x, 0), np.zeros((4, 2)))

    def test_equals_subset_prior_score(self, moons, rng):
        o = ParzenOracle(moons, 1.7)
        x = rng.uniform(-25, 25, size=(30, 2))
        for c in range(2):
            sub = ParzenOracle(subset_by_class(moons, c), 1.7)
            np.testing.assert_array_equal(o.posterior_score(x, c), sub.prior_score(x))

    def test_symmetric_pair_likelihoods_are_opposite(self):
        ds = LabeledDataset(np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([0, 1]), 2)
        o = ParzenOracle(ds, 0.8)
        mid = np.zeros(2)
        np.testing.assert_allclose(o.likelihood_score(mid, 0), -o.likelihood_score(mid, 1), atol=1e-15)

    def test_bayes_identity_exact(self, moons, rng):
        o = ParzenOracle(moons, 0.3)
        x = rng.uniform(-25, 25, size=(50, 2))
        for c in range(2):
            lik = o.likelihood_score(x, c)
            assert np.array_equal(lik, o.posterior_score(x, c) - o.prior_score(x))
            lhs = lik + o.prior_score(x)
            np.testing.assert_allclose(lhs, o.posterior_score(x, c), rtol=1e-12, atol=1e-12)

    def test_likelihood_matches_finite_differences(self, rng):
        ds = _two_class(rng, 30)
        o = ParzenOracle(ds, 1.5)
        h = 1e-5
        for _ in range(10):
            x = rng.normal(scale=5, size=2)
            for c in range(2):
                f = lambda p: o.class_log_density(p, c) - o.prior_log_density(p)  # noqa: E731
                num = np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(2)])
                np.testing.assert_allclose(o.likelihood_score(x, c), num, rtol=1e-6, atol=1e-6)

    def test_empty_class(self):
        ds = LabeledDataset(np.zeros((2, 2)), np.array([0, 0]), 2)
        with pytest.raises(DatasetError):
            ParzenOracle(ds, 1.0).posterior_score([0.0, 0.0], 1)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 2), elements=coords), st.floats(0.05, 10.0))
    def test_score_points_toward_data_hull(self, x, sigma):
        ds = LabeledDataset(np.array([[0.0, 0.0], [1.0, 2.0], [-2.0, 1.0]]), np.array([0, 1, 1]), 2)
        s = ParzenOracle(ds, sigma).prior_score(x)
        # x + sigma^2 s is a convex combination of the data points
        target = x + sigma**2 * s
        assert np.all(target.min(axis=0) >= ds.points.min(axis=0) - 1e-9 * (1 + np.abs(x).max()))
        assert np.all(target.max(axis=0) <= ds.points.max(axis=0) + 1e-9 * (1 + np.abs(x).max()))


class TestRenorm:
    def test_alpha_one_identity(self):
        res = renormalized_posterior_1d(RenormConfig(alpha=1.0))
        for post, ren in zip(res.posterior, res.renormalized):
            np.testing.assert_allclose(ren, post, rtol=0, atol=1e-9)

    @pytest.mark.parametrize("alpha", [0.2, 1.0, 5.0])
    def test_midpoint_is_even(self, alpha):
        cfg = RenormConfig(alpha=alpha)
        x = cfg.grid()
        res = renormalized_posterior_1d(cfg)
        mid = int(np.argmin(np.abs(x)))
        assert x[mid] == 0.0
        prior = res.prior[mid]
        w = [r[mid] / prior for r in res.renormalized]
        assert w[0] == pytest.approx(w[1], rel=1e-12)

    def test_variance_decreases_with_alpha(self):
        v = [renormalized_posterior_1d(RenormConfig(alpha=a)).variance(0) for a in (0.2, 1.0, 5.0)]
        assert v[0] > v[1] > v[2]

    def test_densities_normalized(self):
        from scipy.integrate import trapezoid

        res = renormalized_posterior_1d(RenormConfig(alpha=5.0))
        for ren in res.renormalized:
            assert trapezoid(ren, res.x) == pytest.approx(1.0, abs=1e-6)

    def test_coarse_grid_rejected(self):
        with pytest.raises(ValueError, match="grid"):
            renormalized_posterior_1d(RenormConfig(lo=-2.0, hi=2.0, count=5))

    @pytest.mark.parametrize("kwargs", [{"alpha": 0.0}, {"lo": 1.0, "hi": 0.0}, {"count": 2},
                                        {"weights": (0.3, 0.3)}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ValueError):
            RenormConfig(**kwargs)

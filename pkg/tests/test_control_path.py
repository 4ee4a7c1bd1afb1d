import numpy as np
import pytest

from services.control_path import PathSet, drop_observations, fit
from services.errors import ConfigError, DomainError, InsufficientDataError, NumericError, OrderingError


class TestFit:

    def test_tridiagonal_oracle(self):
        path = fit([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert path.evaluate(0.5)[1] == pytest.approx(0.6875, abs=1e-12)

    def test_time_channel(self):
        path = fit([0.0, 1.0, 3.0], [2.0, -1.0, 4.0])
        assert path.channels == 2
        assert path.evaluate(2.5)[0] == 2.5
        assert path.derivative(2.5)[0] == 1.0

    def test_interpolates_knots_exactly(self):
        rng = np.random.default_rng(0)
        times = np.cumsum(rng.uniform(0.5, 1.5, size=12))
        values = rng.normal(size=12)
        path = fit(times, values)
        for t, x in zip(times, values):
            assert abs(path.evaluate(t)[1] - x) < 1e-10

    def test_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        times = np.arange(10.0)
        path = fit(times, rng.normal(size=10))
        step = 1e-6
        for t in rng.uniform(0.01, 8.99, size=100):
            fd = (path.evaluate(t + step)[1] - path.evaluate(t - step)[1]) / (2 * step)
            assert abs(path.derivative(t)[1] - fd) < 1e-6

    def test_spline_coefficients_shape(self):
        path = fit([0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 0.0, 2.0])
        assert path.spline_coeffs.shape == (4, 3, 1)

    def test_first_and_second_derivatives_are_continuous_at_knots(self):
        rng = np.random.default_rng(3)
        times = np.cumsum(rng.uniform(0.5, 1.5, size=8))
        path = fit(times, rng.normal(size=8))
        eps = 1e-9
        for t in times[1:-1]:
            assert abs(path.derivative(t - eps)[1] - path.derivative(t + eps)[1]) < 1e-6
            assert abs(path.spline(t - eps, 2)[0] - path.spline(t + eps, 2)[0]) < 1e-6

    def test_natural_boundary_has_zero_curvature(self):
        path = fit([0.0, 1.0, 2.5, 3.0], [1.0, -1.0, 2.0, 0.5])
        assert path.spline(0.0, 2)[0] == pytest.approx(0.0, abs=1e-12)
        assert path.spline(3.0, 2)[0] == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_apex_has_zero_slope(self):
        path = fit([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert path.derivative(1.0)[1] == pytest.approx(0.0, abs=1e-12)

    def test_two_knots_is_linear(self):
        path = fit([0.0, 2.0], [1.0, 3.0])
        assert path.evaluate(1.0)[1] == pytest.approx(2.0)
        assert path.derivative(0.3)[1] == pytest.approx(1.0)

    @pytest.mark.parametrize("times, values, error", [
        ([0.0], [1.0], InsufficientDataError),
        ([0.0, 2.0, 1.0], [1.0, 2.0, 3.0], OrderingError),
        ([0.0, 1.0, 1.0], [1.0, 2.0, 3.0], OrderingError),
        ([0.0, 1.0, 2.0], [1.0, np.nan, 3.0], NumericError),
    ])
    def test_rejects_bad_input(self, times, values, error):
        with pytest.raises(error):
            fit(times, values)

    @pytest.mark.parametrize("t", [-0.5, 2.5])
    def test_no_extrapolation(self, t):
        path = fit([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        with pytest.raises(DomainError):
            path.evaluate(t)
        with pytest.raises(DomainError):
            path.derivative(t)

    def test_rounding_overshoot_is_tolerated(self):
        path = fit([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert path.evaluate(2.0 + 1e-12)[1] == pytest.approx(0.0, abs=1e-9)


class TestDropObservations:

    def test_zero_rate_keeps_everything(self):
        times = np.arange(20.0)
        kept, obs = drop_observations(times, times * 2, 0.0, seed=0)
        assert np.array_equal(kept, times)
        assert np.array_equal(obs, times * 2)

    def test_drops_exact_count_and_keeps_endpoints(self):
        times = np.arange(20.0)
        kept, obs = drop_observations(times, times * 2, 0.4, seed=3)
        assert kept.size == 20 - 7          # floor(0.4 * 18) interior knots removed
        assert kept[0] == 0.0 and kept[-1] == 19.0
        assert np.array_equal(obs, kept * 2)
        assert np.all(np.diff(kept) > 0)

    def test_deterministic_per_seed(self):
        times = np.arange(30.0)
        a, _ = drop_observations(times, times, 0.5, seed=(1, 2, 3))
        b, _ = drop_observations(times, times, 0.5, seed=(1, 2, 3))
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_rate_out_of_range(self, rate):
        with pytest.raises(ConfigError):
            drop_observations(np.arange(5.0), np.arange(5.0), rate, seed=0)


class TestPathSet:

    def test_shared_domain(self):
        paths = PathSet.fit_regions([[0.0, 1.0, 2.0], [0.0, 2.0]], [[1.0, 2.0, 3.0], [5.0, 7.0]])
        assert paths.t_start == 0.0 and paths.t_end == 2.0
        assert paths.initial().shape == (2, 2)
        assert np.array_equal(paths.initial()[:, 1], [1.0, 5.0])
        assert np.allclose(paths.derivatives(1.0)[:, 0], 1.0)
        assert paths.values(1.0).shape == (2, 2)

    def test_mismatched_domains(self):
        with pytest.raises(DomainError):
            PathSet.fit_regions([[0.0, 1.0, 2.0], [0.0, 1.0]], [[1.0, 2.0, 3.0], [5.0, 7.0]])

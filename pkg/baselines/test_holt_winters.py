import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from baselines.holt_winters import (
    HAND_TUNED,
    HWFitOptions,
    HWParams,
    RobustFilterParams,
    hw_filter,
    hw_fit,
    hw_forecast,
    hw_simulate,
    initial_state_from_data,
    rhw_clean,
    rhw_filter,
    ssoe_filter,
    ssoe_gain,
)
from escells.errors import EmptyPoolError, InsufficientDataError, InvalidInputError, MissingObservationsError
from escells.model import TimeSeries, build_structure


def params_for(structure, alpha=0.3, beta=0.1, gamma=0.2, x0=None):
    if x0 is None:
        x0 = np.zeros(structure.state_dim)
    return HWParams(alpha=alpha, beta=beta, gamma=gamma, x0=list(map(float, x0)))


class TestHWFilter:
    """Test suite for the smoothing recursions"""

    def setup_method(self):
        """Setup for each test method"""
        self.structure = build_structure(2)

    def test_level_only_example(self):
        """Test alpha = 0.5 from zero on y = (2, 2) gives levels (1, 1.5) and predictions (0, 1)"""
        result = hw_filter(TimeSeries.from_values([2.0, 2.0]), self.structure,
                           params_for(self.structure, 0.5, 0.0, 0.0))
        assert_allclose(result.states[:, 0], [1.0, 1.5])
        assert_allclose(result.predictions, [0.0, 1.0])

    def test_full_adjustment_tracks_data(self):
        """Test alpha = 1 without trend or season makes the level equal y"""
        y = np.array([3.0, -1.0, 4.0, 1.5, 9.0])
        result = hw_filter(TimeSeries.from_values(y), self.structure, params_for(self.structure, 1.0, 0.0, 0.0))
        assert_allclose(result.states[:, 0], y)

    def test_noiseless_residuals_vanish(self):
        """Test data generated without innovations is predicted exactly"""
        structure = build_structure(4)
        params = params_for(structure, x0=[5.0, 0.2, 1.0, -1.0, 0.5, -0.5])
        ts, states = hw_simulate(structure, params, 40)
        result = hw_filter(ts, structure, params)
        assert_allclose(result.residuals, 0.0, atol=1e-12)
        assert_allclose(result.states, states, atol=1e-12)

    def test_matches_ssoe_form(self):
        """Test the component recursions agree with x_t = A x_{t-1} + g eps_t"""
        structure = build_structure(5)
        rng = np.random.default_rng(0)
        params = params_for(structure, 0.4, 0.3, 0.6, x0=rng.normal(size=structure.state_dim))
        ts = TimeSeries.from_values(rng.normal(size=60).cumsum())
        classic = hw_filter(ts, structure, params)
        ssoe = ssoe_filter(ts, structure, params)
        assert np.max(np.abs(classic.states - ssoe.states)) <= 1e-10
        assert np.max(np.abs(classic.predictions - ssoe.predictions)) <= 1e-10

    def test_gain_layout(self):
        """Test the gain is (alpha, alpha beta, gamma, 0, ...)"""
        g = ssoe_gain(params_for(self.structure, 0.5, 0.2, 0.3), self.structure)
        assert_allclose(g, [0.5, 0.1, 0.3, 0.0])

    def test_missing_values_rejected(self):
        """Test gaps are rejected"""
        with pytest.raises(MissingObservationsError):
            hw_filter(TimeSeries.from_values([1.0, None, 2.0]), self.structure, params_for(self.structure))

    def test_wrong_initial_state(self):
        """Test an initial state of the wrong dimension is rejected"""
        with pytest.raises(ValueError):
            hw_filter(TimeSeries.from_values([1.0, 2.0]), self.structure, params_for(self.structure, x0=[0.0, 0.0]))

    def test_params_validation(self):
        """Test smoothing parameters outside [0, 1] are rejected"""
        with pytest.raises(ValueError):
            HWParams(alpha=1.5, beta=0.0, gamma=0.0, x0=[0.0] * 4)


class TestHWFit:
    """Test suite for the least-squares parameter search"""

    def test_constant_series(self):
        """Test a constant series is fitted with zero error"""
        structure = build_structure(3)
        result = hw_fit(TimeSeries.from_values(np.full(30, 7.0)), structure)
        assert result.sse <= 1e-16
        filtered = hw_filter(TimeSeries.from_values(np.full(30, 7.0)), structure, result.params)
        assert np.sum(filtered.residuals ** 2) == pytest.approx(result.sse, abs=1e-12)

    def test_noiseless_round_trip(self):
        """Test data generated from known parameters is fitted to negligible error"""
        structure = build_structure(4)
        params = params_for(structure, 0.2, 0.1, 0.3, x0=[10.0, 0.5, 2.0, -1.0, 1.0, -2.0])
        ts, _ = hw_simulate(structure, params, 80)
        result = hw_fit(ts, structure)
        assert result.sse <= 1e-8 * ts.length

    def test_reported_sse_matches_filter(self):
        """Test the reported SSE is what the filter produces with the returned parameters"""
        structure = build_structure(4)
        params = params_for(structure, 0.3, 0.05, 0.2, x0=[10.0, 0.0, 1.0, -1.0, 1.0, -1.0])
        ts, _ = hw_simulate(structure, params, 120, noise=0.5, seed=3)
        result = hw_fit(ts, structure)
        filtered = hw_filter(ts, structure, result.params)
        assert np.sum(filtered.residuals ** 2) == pytest.approx(result.sse, rel=1e-6)
        assert result.sse <= np.sum(hw_filter(ts, structure, params).residuals ** 2) * (1 + 1e-9)

    def test_hand_tuned(self):
        """Test hand mode keeps the fixed parameters and the heuristic initial state"""
        structure = build_structure(4)
        ts = TimeSeries.from_values(np.sin(np.arange(40) * np.pi / 2) + np.arange(40) * 0.1)
        result = hw_fit(ts, structure, HWFitOptions(hand_tuned=True))
        assert (result.params.alpha, result.params.beta, result.params.gamma) == HAND_TUNED
        assert_allclose(result.params.initial_state, initial_state_from_data(ts, structure))

    def test_short_series(self):
        """Test fewer than p + 2 observations are rejected"""
        with pytest.raises(InsufficientDataError):
            hw_fit(TimeSeries.from_values(np.ones(5)), build_structure(4))

    def test_grid_validation(self):
        """Test grid values outside [0, 1] are rejected"""
        with pytest.raises(ValueError):
            HWFitOptions(grid=[0.0, 1.2])


class TestInitialState:
    """Test suite for the heuristic initial state"""

    def test_recovers_linear_trend(self):
        """Test a pure line gives its slope and zero seasonal values"""
        structure = build_structure(3)
        x0 = initial_state_from_data(TimeSeries.from_values(2.0 + 0.5 * np.arange(10)), structure)
        assert x0[1] == pytest.approx(0.5)
        assert_allclose(x0[2:], 0.0, atol=1e-12)
        # the first prediction reproduces y_0
        assert structure.w @ x0 == pytest.approx(2.0)

    def test_seasonal_slots_sum_to_zero(self):
        """Test the seasonal part is de-meaned"""
        structure = build_structure(4)
        y = np.tile([1.0, 3.0, -2.0, 0.0], 4) + 5.0
        x0 = initial_state_from_data(TimeSeries.from_values(y), structure)
        assert np.sum(x0[2:]) == pytest.approx(0.0, abs=1e-12)


class TestHWSimulate:
    """Test suite for generating Holt-Winters data"""

    def test_explicit_innovations(self):
        """Test supplied innovations are used as given"""
        structure = build_structure(2)
        params = params_for(structure, 0.5, 0.0, 0.0)
        ts, states = hw_simulate(structure, params, 2, noise=np.array([2.0, 0.0]))
        assert_allclose(ts.values, [2.0, 1.0])
        assert_allclose(states[:, 0], [1.0, 1.0])

    def test_seeded(self):
        """Test the same seed gives the same series"""
        structure = build_structure(2)
        params = params_for(structure)
        a, _ = hw_simulate(structure, params, 30, noise=1.0, seed=4)
        b, _ = hw_simulate(structure, params, 30, noise=1.0, seed=4)
        assert_array_equal(a.values, b.values)

    def test_innovation_shape(self):
        """Test the innovation count must match the length"""
        structure = build_structure(2)
        with pytest.raises(InvalidInputError):
            hw_simulate(structure, params_for(structure), 5, noise=np.zeros(4))


class TestHWForecast:
    """Test suite for Holt-Winters forecasts"""

    def setup_method(self):
        """Setup for each test method"""
        self.structure = build_structure(4)
        self.params = params_for(self.structure, 0.3, 0.1, 0.2)
        self.final = np.array([10.0, 0.5, 1.0, -1.0, 2.0, -2.0])

    def test_mean_path_emits_first(self):
        """Test the first mean value is w . x_final and the path then follows A"""
        result = hw_forecast(self.final, self.structure, self.params, None, 6, bands=False)
        expected = [self.structure.w @ np.linalg.matrix_power(self.structure.A, k) @ self.final for k in range(6)]
        assert_allclose(result.mean["y"], expected)
        assert result.method == "hw"
        assert_array_equal(result.outer["y"].lower, result.mean["y"])

    def test_zero_pool_collapses(self):
        """Test a pool of zeros gives bands on the mean path"""
        result = hw_forecast(self.final, self.structure, self.params, np.zeros(5), 8, n_paths=20)
        assert_allclose(result.outer["y"].lower, result.mean["y"])
        assert_allclose(result.outer["y"].upper, result.mean["y"])

    def test_bands_nest_and_widen(self):
        """Test outer bands contain inner ones and grow with the horizon"""
        pool = np.random.default_rng(1).normal(size=500)
        result = hw_forecast(self.final, self.structure, self.params, pool, 30, n_paths=2000, level=0.9)
        assert result.outer["y"].contains(result.inner["y"])
        width = result.outer["y"].upper - result.outer["y"].lower
        assert width[-1] > width[0]

    def test_seeded(self):
        """Test the same seed gives identical bands"""
        pool = np.random.default_rng(1).normal(size=50)
        a = hw_forecast(self.final, self.structure, self.params, pool, 10, n_paths=100, seed=3)
        b = hw_forecast(self.final, self.structure, self.params, pool, 10, n_paths=100, seed=3)
        assert_array_equal(a.outer["y"].upper, b.outer["y"].upper)

    def test_empty_pool(self):
        """Test bands need residuals"""
        with pytest.raises(EmptyPoolError):
            hw_forecast(self.final, self.structure, self.params, np.array([]), 5)

    def test_horizon(self):
        """Test the horizon must be positive"""
        with pytest.raises(InvalidInputError):
            hw_forecast(self.final, self.structure, self.params, np.zeros(3), 0)


class TestRobustFilter:
    """Test suite for the clipped pre-filter"""

    def setup_method(self):
        """Setup for each test method"""
        self.structure = build_structure(2)
        self.params = params_for(self.structure, 0.3, 0.0, 0.0, x0=[5.0, 0.0, 0.0, 0.0])
        self.rparams = RobustFilterParams(sigma0=10.0, scale_to_data=False)

    def test_defaults(self):
        """Test the published pre-filter constants"""
        rparams = RobustFilterParams()
        assert rparams.sigma0 == 0.05
        assert rparams.lambda_sigma == 0.01

    def test_small_residuals_pass_through(self):
        """Test a series within huber_k scales comes back unchanged"""
        y = 5.0 + np.random.default_rng(0).uniform(-1.0, 1.0, size=50)
        trace = rhw_filter(TimeSeries.from_values(y), self.structure, self.params, self.rparams)
        assert not trace.clipped.any()
        assert_array_equal(trace.cleaned, y)

    def test_spike_is_clipped_to_bound(self):
        """Test a huge spike is replaced by the prediction plus huber_k scales"""
        y = np.full(20, 5.0)
        y[10] = 1e6
        trace = rhw_filter(TimeSeries.from_values(y), self.structure, self.params, self.rparams)
        assert trace.clipped[10]
        assert trace.cleaned[10] == trace.predictions[10] + self.rparams.huber_k * trace.scales[10]
        assert trace.clipped.sum() == 1

    def test_scale_stays_bounded(self):
        """Test the bounded rho caps how fast the scale can grow"""
        y = np.full(30, 5.0)
        y[5:] = 1e9
        trace = rhw_filter(TimeSeries.from_values(y), self.structure, self.params, self.rparams)
        growth = trace.scales[1:] / trace.scales[:-1]
        bound = np.sqrt(self.rparams.lambda_sigma * self.rparams.rho_bound + 1 - self.rparams.lambda_sigma)
        assert np.all(growth <= bound + 1e-12)

    def test_clean_is_idempotent_without_spikes(self):
        """Test cleaning a cleaned series changes nothing when nothing was clipped"""
        y = 5.0 + 0.1 * np.sin(np.arange(40))
        once = rhw_clean(TimeSeries.from_values(y), self.structure, self.params, self.rparams)
        twice = rhw_clean(once, self.structure, self.params, self.rparams)
        assert_array_equal(once.values, twice.values)

    def test_clean_is_idempotent_with_spikes(self):
        """Test a second cleaning pass leaves a spiked series unchanged under the default scale"""
        y = 5.0 + np.random.default_rng(4).normal(scale=0.5, size=200)
        y[[50, 120, 121]] += [40.0, -35.0, 60.0]
        series = TimeSeries.from_values(y)
        once = rhw_clean(series, self.structure, self.params)
        twice = rhw_clean(once, self.structure, self.params)
        assert rhw_filter(series, self.structure, self.params).clipped[[50, 120, 121]].all()
        assert_allclose(twice.values, once.values, rtol=0.0, atol=1e-12)

    def test_default_scale_is_anchored(self):
        """Test the default filter starts from the literal sigma0 whatever the series spread"""
        y = np.random.default_rng(2).normal(scale=4.0, size=200) + 5.0
        trace = rhw_filter(TimeSeries.from_values(y), self.structure, self.params)
        assert not RobustFilterParams().scale_to_data
        assert trace.scales[0] == 0.05

    def test_scale_to_data(self):
        """Test sigma0 is read relative to the spread of the series"""
        y = np.random.default_rng(2).normal(scale=4.0, size=200) + 5.0
        relative = rhw_filter(TimeSeries.from_values(y), self.structure, self.params,
                              RobustFilterParams(sigma0=0.5, scale_to_data=True))
        spread = 1.4826 * np.median(np.abs(y - np.median(y)))
        assert relative.scales[0] == pytest.approx(0.5 * spread)

    def test_missing_values_rejected(self):
        """Test gaps are rejected"""
        with pytest.raises(MissingObservationsError):
            rhw_filter(TimeSeries.from_values([1.0, None]), self.structure, self.params)

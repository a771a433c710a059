import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from baselines.holt_winters import HWParams, hw_simulate
from escells.analytics import decompose, linear_interpolation, rmse
from escells.errors import InsufficientDataError
from escells.fitting import FitResult, FitSettings, fit_escells
from escells.forecast import ForecastSettings
from escells.model import TimeSeries, build_structure
from escells.solver import SolverConfig


CALIBRATION_PARAMS = HWParams(alpha=0.3, beta=0.05, gamma=0.2, x0=[10.0, 0.1, 1.0, -1.0, 0.5, -0.5])


def seasonal_series(length, period, seed, noise=0.2):
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    return 20.0 + 0.02 * t + 3.0 * np.sin(2 * np.pi * t / period) + rng.normal(scale=noise, size=length)


class TestFitSettings:
    """Test suite for fit settings"""

    def test_defaults(self):
        """Test K and the burn-in default to the period"""
        settings = FitSettings(period=7)
        assert settings.window == 7
        assert settings.pool_burn_in == 7
        assert settings.lambda1 == 1.0
        assert settings.lambda2 == 10.0
        assert settings.decay == 0.9
        assert settings.error_lag == 7

    def test_explicit_values(self):
        """Test explicit K and burn-in win over the defaults"""
        settings = FitSettings(period=7, half_width=3, burn_in=0)
        assert settings.window == 3
        assert settings.pool_burn_in == 0
        assert settings.error_lag == 3
        assert FitSettings(period=7, origin_lag=0).error_lag == 0

    def test_from_env(self, monkeypatch):
        """Test regularisation weights come from the environment unless overridden"""
        monkeypatch.setenv("ESCELLS_LAMBDA1", "0.5")
        monkeypatch.setenv("ESCELLS_DECAY", "0.8")
        settings = FitSettings.from_env(12, lambda2=3.0, half_width=None)
        assert settings.lambda1 == 0.5
        assert settings.decay == 0.8
        assert settings.lambda2 == 3.0
        assert settings.window == 12

    def test_rejects_period(self):
        """Test the period must be at least 2"""
        with pytest.raises(ValueError):
            FitSettings(period=1)


class TestFitEscells:
    """Test suite for the end-to-end fit"""

    def setup_method(self):
        """Setup for each test method"""
        self.ts = TimeSeries.from_values(seasonal_series(60, 4, seed=1))
        self.settings = FitSettings(period=4)
        self.config = SolverConfig(max_iterations=2000)

    def test_shapes(self):
        """Test every state sequence covers t = 0..T"""
        fit = fit_escells(self.ts, self.settings, self.config)
        assert fit.raw_states.shape == (60, 6)
        assert fit.centered.shape == (60, 6)
        assert fit.states.shape == (60, 6)
        assert fit.prior_state.shape == (6,)
        assert len(fit.decomposition) == 60
        assert fit.residuals.size == 60
        assert_array_equal(fit.final_state, fit.centered[-1])

    def test_states_are_retimed(self):
        """Test state t is the centred state of t + 1"""
        fit = fit_escells(self.ts, self.settings, self.config)
        assert_array_equal(fit.states[:-1], fit.centered[1:])
        assert_array_equal(fit.prior_state, fit.centered[0])
        assert_allclose(fit.fitted, fit.centered @ fit.structure.w)

    def test_residuals_are_data_minus_fit(self):
        """Test residuals are the observations minus the one-step fitted values"""
        fit = fit_escells(self.ts, self.settings, self.config)
        assert_allclose(fit.residuals, self.ts.values - fit.fitted)

    def test_pools_skip_boundaries(self):
        """Test the default burn-in drops K points at each end"""
        fit = fit_escells(self.ts, self.settings, self.config)
        assert fit.pools.residual_times.min() == 4
        assert fit.pools.residual_times.max() == 55

    def test_round_trip(self):
        """Test a fit survives JSON serialisation"""
        fit = fit_escells(self.ts.with_missing([10, 11]), self.settings, self.config)
        restored = FitResult.from_dict(json.loads(json.dumps(fit.to_dict())))
        assert_array_equal(restored.states, fit.states)
        assert_array_equal(restored.ts.mask, fit.ts.mask)
        assert_array_equal(restored.pools.increments, fit.pools.increments)
        assert restored.stats.iterations == fit.stats.iterations
        assert restored.settings == fit.settings

    def test_forecast_from_fit(self):
        """Test a fit forecasts with its own pools and final state"""
        fit = fit_escells(self.ts, self.settings, self.config)
        result = fit.forecast(ForecastSettings(horizon=8, n_paths=200))
        assert result.mean["y"].shape == (8,)
        assert result.outer["y"].contains(result.inner["y"])

    def test_bands_strictly_nest(self):
        """Test the outer y band is strictly wider than the inner one at every horizon"""
        structure = build_structure(4)
        ts, _ = hw_simulate(structure, CALIBRATION_PARAMS, 80, noise=0.5, seed=3)
        fit = fit_escells(ts, FitSettings(period=4), self.config)
        result = fit.forecast(ForecastSettings(horizon=10, n_paths=2000, level=0.99))
        assert np.all(result.outer["y"].lower < result.inner["y"].lower)
        assert np.all(result.inner["y"].upper < result.outer["y"].upper)

    def test_too_few_observations(self):
        """Test a series with fewer than p + 2 observations is rejected"""
        with pytest.raises(InsufficientDataError):
            fit_escells(TimeSeries.from_values([1.0, 2.0, None, 3.0]), FitSettings(period=4))

    def test_noiseless_recovery(self):
        """Test components of noiseless Holt-Winters data are recovered"""
        structure = build_structure(4)
        params = HWParams(alpha=0.2, beta=0.1, gamma=0.3, x0=[10.0, 0.3, 1.5, -0.5, 1.0, -2.0])
        ts, truth_states = hw_simulate(structure, params, 48)
        fit = fit_escells(ts, FitSettings(period=4, lambda1=0.01),
                          SolverConfig(max_iterations=20000, tolerance=1e-8))
        truth = decompose(truth_states, structure)
        assert np.max(np.abs(fit.decomposition.level - truth.level)) <= 1e-3
        assert np.max(np.abs(fit.decomposition.trend - truth.trend)) <= 1e-3
        assert np.max(np.abs(fit.decomposition.seasonal - truth.seasonal)) <= 1e-3

    def test_gap_imputation_beats_interpolation(self):
        """Test a 50-point gap is filled more accurately than by a straight line"""
        values = seasonal_series(240, 12, seed=4)
        gap = np.arange(100, 150)
        ts = TimeSeries.from_values(values).with_missing(gap)
        fit = fit_escells(ts, FitSettings(period=12), SolverConfig(max_iterations=3000))
        filled = fit.imputed()
        assert filled.observed_count == 240
        assert_array_equal(filled.values[ts.mask], values[ts.mask])
        assert rmse(values[gap], filled.values[gap]) <= rmse(values[gap], linear_interpolation(ts)[gap])


@pytest.mark.slow
class TestChunkImputation:
    """Test suite for filling two long deleted chunks"""

    def test_two_chunks(self):
        """Test two deleted chunks of 100 points are filled better than by straight lines"""
        values = seasonal_series(1000, 12, seed=7, noise=0.5)
        values[np.random.default_rng(8).choice(1000, size=15, replace=False)] += 40.0
        chunks = np.concatenate([np.arange(250, 350), np.arange(650, 750)])
        ts = TimeSeries.from_values(values).with_missing(chunks)
        fit = fit_escells(ts, FitSettings(period=12), SolverConfig(max_iterations=5000))
        filled = fit.imputed()
        assert rmse(values[chunks], filled.values[chunks]) <= rmse(values[chunks], linear_interpolation(ts)[chunks])

    def test_nearby_spikes_barely_move_fill(self):
        """Test spikes a few points outside each chunk change the filled values by at most 5% relative"""
        values = seasonal_series(1000, 12, seed=7, noise=0.5)
        chunks = np.concatenate([np.arange(250, 350), np.arange(650, 750)])
        spiked = values.copy()
        spiked[[244, 247, 353, 356, 644, 647, 753, 756]] += 40.0
        settings, config = FitSettings(period=12), SolverConfig(max_iterations=5000)
        clean = fit_escells(TimeSeries.from_values(values).with_missing(chunks), settings, config).imputed()
        dirty = fit_escells(TimeSeries.from_values(spiked).with_missing(chunks), settings, config).imputed()
        change = np.abs(dirty.values[chunks] - clean.values[chunks])
        assert np.all(change <= 0.05 * np.abs(clean.values[chunks]))


@pytest.mark.slow
class TestForecastCalibration:
    """Test suite for forecast bands on held-out Holt-Winters data"""

    def test_outer_band_coverage(self):
        """Test 99% outer bands cover the tenth held-out point for at least 95% of 200 series"""
        structure = build_structure(4)
        hits = []
        for seed in range(200):
            ts, _ = hw_simulate(structure, CALIBRATION_PARAMS, 90, noise=0.5, seed=seed)
            train = TimeSeries.from_values(ts.values[:80])
            fit = fit_escells(train, FitSettings(period=4), SolverConfig(max_iterations=2000))
            result = fit.forecast(ForecastSettings(horizon=10, n_paths=2000, level=0.99, seed=seed))
            outer, inner = result.outer["y"], result.inner["y"]
            assert np.all(outer.lower < inner.lower) and np.all(inner.upper < outer.upper)
            hits.append(outer.lower[9] <= ts.values[89] <= outer.upper[9])
        assert np.mean(hits) >= 0.95

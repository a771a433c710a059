import time

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from app.models import BenchmarkSettings, SynthConfig
from app.services.benchmark import run_benchmark
from app.services.synth import synth_generate
from escells.errors import InsufficientDataError
from escells.fitting import FitSettings
from escells.model import TimeSeries
from escells.solver import SolverConfig


def small_series(length=120, period=4, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    return TimeSeries.from_values(50.0 + 0.1 * t + 4.0 * np.sin(2 * np.pi * t / period) + rng.normal(size=length))


class TestRunBenchmark:
    """Test suite for the forecast accuracy comparison"""

    def setup_method(self):
        """Setup for each test method"""
        self.ts = small_series()
        self.settings = BenchmarkSettings(horizon=20, window=5)
        self.solver = SolverConfig(max_iterations=500)

    def test_all_methods_scored(self):
        """Test each method gets a forecast and a MAPE series over the held-out part"""
        table = run_benchmark(self.ts, 4, self.settings, solver_config=self.solver)
        assert table.split == 100
        assert set(table.forecasts) == {"hw", "rhw", "escells"}
        for name, mape in table.mape.items():
            assert table.forecasts[name].shape == (20,)
            assert mape.values.size == 20 - 5 + 1
            assert np.all(mape.values >= 0)
        assert "median_mape_escells" in table.summary
        assert 0.0 <= table.summary["fraction_escells_le_hw"] <= 1.0

    def test_oracle_scores_zero(self):
        """Test a forecast equal to the held-out values has zero MAPE"""
        actual = self.ts.values[100:120]
        table = run_benchmark(self.ts, 4, self.settings.model_copy(update={"methods": ["hw"]}),
                              extra_forecasts={"oracle": actual})
        assert_array_equal(table.mape["oracle"].values, np.zeros(16))

    def test_deterministic(self):
        """Test repeated runs give identical forecasts"""
        a = run_benchmark(self.ts, 4, self.settings, solver_config=self.solver)
        b = run_benchmark(self.ts, 4, self.settings, solver_config=self.solver)
        for name in a.forecasts:
            assert_array_equal(a.forecasts[name], b.forecasts[name])

    def test_workers_do_not_change_results(self):
        """Test fitting methods concurrently gives the same table"""
        a = run_benchmark(self.ts, 4, self.settings, solver_config=self.solver)
        b = run_benchmark(self.ts, 4, self.settings.model_copy(update={"workers": 3}), solver_config=self.solver)
        assert a.summary == b.summary

    def test_gappy_training_data(self):
        """Test gaps in the training part are tolerated by every method"""
        gappy = self.ts.with_missing([10, 11, 50])
        table = run_benchmark(gappy, 4, self.settings, solver_config=self.solver)
        assert all(np.all(np.isfinite(values)) for values in table.forecasts.values())

    def test_missing_actuals_keep_positions(self):
        """Test a gap in the held-out part skips the windows over it without shifting the rest"""
        gappy = self.ts.with_missing([108])
        settings = self.settings.model_copy(update={"methods": ["hw"]})
        table = run_benchmark(gappy, 4, settings, extra_forecasts={"oracle": self.ts.values[100:120]})
        oracle = table.mape["oracle"]
        assert oracle.skipped == [8, 9, 10, 11, 12]
        assert_array_equal(oracle.positions, [4, 5, 6, 7, 13, 14, 15, 16, 17, 18, 19])
        assert_array_equal(table.mape["hw"].positions, oracle.positions)

    def test_hand_tuned_mode(self):
        """Test hand-tuned Holt-Winters parameters can replace the search"""
        settings = self.settings.model_copy(update={"methods": ["hw"], "hw_mode": "hand"})
        table = run_benchmark(self.ts, 4, settings)
        assert set(table.forecasts) == {"hw"}

    def test_split_too_early(self):
        """Test a training part shorter than p + 2 is rejected"""
        with pytest.raises(InsufficientDataError):
            run_benchmark(self.ts, 4, self.settings.model_copy(update={"split": 3}))

    def test_horizon_past_end(self):
        """Test a horizon reaching beyond the series is rejected"""
        with pytest.raises(InsufficientDataError):
            run_benchmark(self.ts, 4, self.settings.model_copy(update={"split": 110}))


@pytest.mark.slow
class TestSyntheticBenchmark:
    """Test suite for the heteroscedastic synthetic preset"""

    def test_escells_beats_hw(self):
        """Test ES-Cells is at least as accurate as Holt-Winters at 90% of positions with half its median error"""
        ts = synth_generate(SynthConfig.preset("fig1")).ts
        started = time.perf_counter()
        table = run_benchmark(ts, 12, BenchmarkSettings(methods=["hw", "escells"]), FitSettings(period=12))
        assert time.perf_counter() - started <= 60.0
        assert table.summary["fraction_escells_le_hw"] >= 0.9
        assert table.summary["median_ratio_hw_escells"] >= 2.0

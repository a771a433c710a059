"""Synthetic series with known components, for benchmarks and tests."""

from dataclasses import dataclass

import numpy as np
from scipy import stats

from escells.analytics import Decomposition
from escells.model import TimeSeries

from ..models import NoiseSchedule, SynthConfig

OUTLIER_TAIL_DF = 3


@dataclass(frozen=True)
class SynthResult:
    ts: TimeSeries
    truth: Decomposition
    outliers: np.ndarray  # indices of planted outliers
    sigma: np.ndarray
    innovations: np.ndarray  # standard normal draws eta_t
    outlier_values: np.ndarray

    def signal(self) -> np.ndarray:
        """Noise-free level + seasonal."""
        return self.truth.level + self.truth.seasonal


def noise_scale(schedule: NoiseSchedule, length: int) -> np.ndarray:
    t = np.arange(length, dtype=float)
    if schedule.kind == "sinusoidal":
        return schedule.base + schedule.amplitude * np.sin(2.0 * np.pi * t / schedule.period)
    sigma = np.zeros(length)
    for start, value in sorted(schedule.segments):
        sigma[int(start):] = value
    return sigma


def seasonal_pattern(period: int, amplitude: float, length: int) -> np.ndarray:
    """Zero-mean pattern of period p: fundamental plus half-strength second harmonic."""
    t = np.arange(length, dtype=float)
    return amplitude * (np.cos(2.0 * np.pi * t / period) + 0.5 * np.sin(4.0 * np.pi * t / period))


def synth_generate(config: SynthConfig) -> SynthResult:
    """
    y_t = level_t + seasonal_t + sigma_t * eta_t + outlier_t.

    Draws come from one generator seeded by ``config.seed`` in a fixed order: innovations,
    outlier positions, outlier magnitudes (Student-t, 3 degrees of freedom), outlier signs.
    """
    n = config.length
    rng = np.random.default_rng(config.seed)

    trend = np.full(n, config.base_trend)
    for time, delta in config.trend_shifts:
        trend[int(time):] += delta
    jumps = np.zeros(n)
    for time, delta in config.level_shifts:
        jumps[int(time):] += delta
    level = config.base_level + np.concatenate(([0.0], np.cumsum(trend[:-1]))) + jumps
    seasonal = seasonal_pattern(config.period, config.seasonal_amplitude, n)
    sigma = noise_scale(config.noise, n)

    eta = rng.standard_normal(n)
    planted = rng.random(n) < config.outlier_fraction
    magnitude = config.outlier_scale * (1.0 + np.abs(stats.t(df=OUTLIER_TAIL_DF).rvs(size=n, random_state=rng)))
    signs = rng.choice(np.array([-1.0, 1.0]), size=n)
    outlier_values = np.where(planted, signs * magnitude, 0.0)

    values = level + seasonal + sigma * eta + outlier_values
    return SynthResult(
        ts=TimeSeries.from_values(values),
        truth=Decomposition(level=level, trend=trend, seasonal=seasonal),
        outliers=np.flatnonzero(planted),
        sigma=sigma,
        innovations=eta,
        outlier_values=outlier_values,
    )

"""Decomposition, anomaly flags, gap filling and sliding MAPE from fitted state sequences."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatchError, EmptyPoolError, InvalidInputError
from .model import LEVEL, SEASON_START, TREND, ModelStructure, TimeSeries, transition_power_solve

logger = logging.getLogger(__name__)

DEFAULT_ANOMALY_FRACTION = 0.015
DEFAULT_MAPE_WINDOW = 10


@dataclass(frozen=True)
class Decomposition:
    level: np.ndarray
    trend: np.ndarray
    seasonal: np.ndarray

    def __len__(self) -> int:
        return int(self.level.shape[0])

    def to_dict(self) -> dict:
        return {"level": self.level.tolist(), "trend": self.trend.tolist(), "seasonal": self.seasonal.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Decomposition":
        return cls(
            level=np.asarray(data["level"], dtype=float),
            trend=np.asarray(data["trend"], dtype=float),
            seasonal=np.asarray(data["seasonal"], dtype=float),
        )


@dataclass(frozen=True)
class AnomalyReport:
    indices: np.ndarray  # positions in the residual sequence, ascending
    low: float
    high: float
    fraction: float
    times: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        return {
            "indices": self.indices.tolist(),
            "times": None if self.times is None else self.times.tolist(),
            "low": self.low,
            "high": self.high,
            "fraction": self.fraction,
        }


@dataclass(frozen=True)
class SlidingMape:
    positions: np.ndarray
    values: np.ndarray
    window: int
    skipped: List[int] = field(default_factory=list)


def decompose(states: np.ndarray, structure: ModelStructure) -> Decomposition:
    """Level, trend and most recent seasonal slot of each state."""
    states = structure.check_state(states)
    return Decomposition(
        level=states[:, LEVEL].copy(),
        trend=states[:, TREND].copy(),
        seasonal=states[:, SEASON_START].copy(),
    )


def detect_anomalies(
    residuals: np.ndarray,
    fraction: float = DEFAULT_ANOMALY_FRACTION,
    times: Optional[np.ndarray] = None,
) -> AnomalyReport:
    """
    Flag the ceil(fraction * N) residuals furthest from the residual median.

    Ties in distance go to the earlier position. ``times`` maps positions back to series
    time indices for the report.
    """
    residuals = np.asarray(residuals, dtype=float)
    if residuals.size == 0:
        raise EmptyPoolError("no residuals to score")
    if not 0.0 < fraction < 0.5:
        raise InvalidInputError(f"fraction must lie in (0, 0.5), got {fraction}")
    if times is not None and len(times) != residuals.size:
        raise DimensionMismatchError("times and residuals differ in length")

    N = residuals.size
    count = min(N, math.ceil(fraction * N - 1e-9))
    median = float(np.median(residuals))
    distance = np.abs(residuals - median)
    order = np.lexsort((np.arange(N), -distance))
    flagged = np.sort(order[:count])
    cutoff = float(distance[order[count - 1]]) if count else float("inf")
    return AnomalyReport(
        indices=flagged,
        low=median - cutoff,
        high=median + cutoff,
        fraction=float(fraction),
        times=None if times is None else np.asarray(times)[flagged],
    )


def impute(
    ts: TimeSeries,
    states: np.ndarray,
    structure: ModelStructure,
    prior_state: Optional[np.ndarray] = None,
) -> TimeSeries:
    """Fill missing y_t with w . x_{t-1}; observed values pass through untouched."""
    states = structure.check_state(states)
    if states.shape[0] != ts.length:
        raise DimensionMismatchError(f"expected {ts.length} states, got {states.shape[0]}")
    if prior_state is None:
        prior_state = transition_power_solve(structure, states[0])
    previous = np.vstack([structure.check_state(prior_state)[None, :], states[:-1]])
    predicted = previous @ structure.w
    return TimeSeries(values=np.where(ts.mask, ts.values, predicted), mask=np.ones(ts.length, dtype=bool))


def linear_interpolation(ts: TimeSeries) -> np.ndarray:
    """Straight-line gap filling between observed neighbours, flat beyond the ends."""
    if ts.observed_count == 0:
        raise EmptyPoolError("no observed values to interpolate")
    times = np.arange(ts.length)
    return np.interp(times, times[ts.mask], ts.values[ts.mask])


def rmse(actual: np.ndarray, predicted: np.ndarray) -> float:
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape:
        raise DimensionMismatchError(f"shapes differ: {actual.shape} vs {predicted.shape}")
    return float(np.sqrt(np.mean((actual - predicted) ** 2)))


def mape_sliding(
    actual: np.ndarray,
    predicted: np.ndarray,
    window: int = DEFAULT_MAPE_WINDOW,
) -> SlidingMape:
    """
    Trailing-window MAPE in percent.

    Position t averages 100 |actual - predicted| / |actual| over t - window + 1..t. The
    first window - 1 positions are not reported, and windows containing a zero or missing (NaN)
    actual are skipped with a warning.
    """
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape or actual.ndim != 1:
        raise DimensionMismatchError(f"actual and predicted must be equal-length 1-d, got {actual.shape}, {predicted.shape}")
    if window < 1:
        raise InvalidInputError(f"window must be >= 1, got {window}")
    if actual.size < window:
        return SlidingMape(positions=np.array([], dtype=int), values=np.array([]), window=window)

    unusable = (actual == 0) | np.isnan(actual)
    safe = np.where(unusable, 1.0, actual)
    ape = np.where(unusable, 0.0, 100.0 * np.abs(safe - predicted) / np.abs(safe))
    means = sliding_window_view(ape, window).mean(axis=1)
    blocked = sliding_window_view(unusable, window).any(axis=1)
    positions = np.arange(window - 1, actual.size)
    skipped = positions[blocked].tolist()
    if skipped:
        logger.warning("skipped %d MAPE windows containing a zero or missing actual value", len(skipped))
    return SlidingMape(positions=positions[~blocked], values=means[~blocked], window=window, skipped=skipped)

"""
Noise pools and Monte Carlo forecasts.

Pools hold the empirical one-step residuals and smoothing increments of a fit, plus optional
in-sample multi-step errors. Forecast paths start from a final state, resample whole increment
vectors (and observation noise for the outer band) and are summarised by nearest-rank
quantile bands.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field

from .errors import EmptyPoolError, InvalidInputError
from .model import LEVEL, TREND, ModelStructure, TimeSeries, transition_power_apply

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

COMPONENTS = ("level", "trend", "seasonal", "y")
MAD_TO_SIGMA = 1.4826


class ForecastSettings(BaseModel):
    """Settings for forecast simulation."""

    horizon: int = Field(default=100, ge=1, description="Number of steps ahead")
    n_paths: int = Field(default=10000, ge=1, description="Monte Carlo paths")
    level: float = Field(default=0.99, ge=0.5, lt=1.0, description="Confidence level of the bands")
    seed: int = Field(default=0, description="Ensemble seed")
    residual_source: Literal["horizon", "empirical", "gaussian"] = Field(
        default="horizon",
        description="Observation noise: in-sample multi-step error paths, resampled one-step residuals or a robust Gaussian",
    )
    workers: int = Field(default=1, ge=1, description="Threads used for path simulation")

    @classmethod
    def from_env(cls, **overrides) -> "ForecastSettings":
        values = {}
        if os.getenv("ESCELLS_WORKERS"):
            values["workers"] = int(os.getenv("ESCELLS_WORKERS", "1"))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class NoisePools:
    residuals: np.ndarray  # eps_hat_t
    residual_times: np.ndarray
    increments: np.ndarray  # g_hat_t, one row per time
    increment_times: np.ndarray
    # (origins, horizon) k-step errors, NaN where the target is unobserved; not persisted
    horizon_errors: Optional[np.ndarray] = None

    @property
    def has_horizon_errors(self) -> bool:
        return self.horizon_errors is not None and bool(np.isfinite(self.horizon_errors).any())

    @property
    def robust_scale(self) -> float:
        """MAD-based standard deviation of the residual pool."""
        if self.residuals.size == 0:
            raise EmptyPoolError("residual pool is empty")
        deviation = np.abs(self.residuals - np.median(self.residuals))
        return float(MAD_TO_SIGMA * np.median(deviation))

    def to_dict(self) -> dict:
        return {
            "residuals": self.residuals.tolist(),
            "residual_times": self.residual_times.tolist(),
            "increments": self.increments.tolist(),
            "increment_times": self.increment_times.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, state_dim: int) -> "NoisePools":
        increments = np.asarray(data["increments"], dtype=float).reshape(-1, state_dim)
        return cls(
            residuals=np.asarray(data["residuals"], dtype=float),
            residual_times=np.asarray(data["residual_times"], dtype=int),
            increments=increments,
            increment_times=np.asarray(data["increment_times"], dtype=int),
        )


@dataclass(frozen=True)
class PathEnsemble:
    """Simulated paths, shape (n_paths, horizon) per component.

    ``signal`` is level + trend + seasonal of the emitting state; ``y = signal + noise``.
    """

    level: np.ndarray
    trend: np.ndarray
    seasonal: np.ndarray
    signal: np.ndarray
    noise: np.ndarray

    @property
    def y(self) -> np.ndarray:
        return self.signal + self.noise

    @property
    def n_paths(self) -> int:
        return int(self.signal.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.signal.shape[1])

    def component(self, name: str) -> np.ndarray:
        if name == "y":
            return self.y
        return getattr(self, name)


@dataclass(frozen=True)
class Band:
    lower: np.ndarray
    upper: np.ndarray

    def contains(self, other: "Band") -> bool:
        return bool(np.all(self.lower <= other.lower) and np.all(other.upper <= self.upper))


@dataclass
class ForecastResult:
    horizon: int
    level: float
    n_paths: int
    seed: int
    mean: Dict[str, np.ndarray]
    inner: Dict[str, Band]
    outer: Dict[str, Band]
    method: str = "escells"
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "horizon": self.horizon,
            "level": self.level,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "settings": self.settings,
            "mean": {k: v.tolist() for k, v in self.mean.items()},
            "inner": {k: {"lower": b.lower.tolist(), "upper": b.upper.tolist()} for k, b in self.inner.items()},
            "outer": {k: {"lower": b.lower.tolist(), "upper": b.upper.tolist()} for k, b in self.outer.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ForecastResult":
        def bands(raw):
            return {k: Band(np.asarray(v["lower"]), np.asarray(v["upper"])) for k, v in raw.items()}

        return cls(
            horizon=int(data["horizon"]),
            level=float(data["level"]),
            n_paths=int(data["n_paths"]),
            seed=int(data["seed"]),
            mean={k: np.asarray(v, dtype=float) for k, v in data["mean"].items()},
            inner=bands(data["inner"]),
            outer=bands(data["outer"]),
            method=data.get("method", "escells"),
            settings=data.get("settings", {}),
        )


def extract_residuals(
    ts: TimeSeries,
    states: np.ndarray,
    structure: ModelStructure,
    prior_state: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    One-step residuals eps_hat_t = y_t - w . x_{t-1}.

    Args:
        ts: Series the states were fitted on
        states: State sequence for t = 0..T, state t predicting y_{t+1}
        structure: Model structure
        prior_state: State preceding t = 0; when given, t = 0 gets a residual too

    Returns:
        (times, residuals) for the observed t, missing times excluded
    """
    states = structure.check_state(states)
    if states.shape[0] != ts.length:
        raise InvalidInputError(f"expected {ts.length} states, got {states.shape[0]}")
    predictions = np.empty(ts.length)
    predictions[1:] = states[:-1] @ structure.w
    predictions[0] = np.nan if prior_state is None else float(structure.check_state(prior_state) @ structure.w)
    times = np.arange(ts.length)
    keep = ts.mask & ~np.isnan(predictions)
    return times[keep], ts.values[keep] - predictions[keep]


def extract_increments(states: np.ndarray, structure: ModelStructure) -> np.ndarray:
    """g_hat_t = x_t - A x_{t-1} for t = 1..T."""
    states = structure.check_state(states)
    return states[1:] - transition_power_apply(structure, states[:-1], 1)


def build_pools(
    ts: TimeSeries,
    states: np.ndarray,
    structure: ModelStructure,
    burn_in: int = 0,
    prior_state: Optional[np.ndarray] = None,
) -> NoisePools:
    """Residual and increment pools without the first and last ``burn_in`` time points."""
    if burn_in < 0:
        raise InvalidInputError(f"burn_in must be >= 0, got {burn_in}")
    T = ts.last_index
    times, residuals = extract_residuals(ts, states, structure, prior_state)
    increments = extract_increments(states, structure)
    increment_times = np.arange(1, T + 1)

    def inside(t):
        return (t >= burn_in) & (t <= T - burn_in)

    keep_r = inside(times)
    keep_g = inside(increment_times)
    if not keep_r.any() or not keep_g.any():
        logger.warning("burn-in of %d leaves an empty pool for a series of length %d", burn_in, ts.length)
    return NoisePools(
        residuals=residuals[keep_r],
        residual_times=times[keep_r],
        increments=increments[keep_g],
        increment_times=increment_times[keep_g],
    )


def extract_horizon_errors(
    ts: TimeSeries,
    states: np.ndarray,
    structure: ModelStructure,
    horizon: int,
    origin_lag: int,
    burn_in: int = 0,
) -> np.ndarray:
    """
    In-sample k-step errors e_t(k) = y_{t+k} - w . A^(lag+k) x_{t-lag-1} for k = 1..horizon.

    States are re-timed (row s predicts y_{s+1}), so x_{t-1} has a cell window ending at t like
    the final state of a fit. A positive ``origin_lag`` starts further back, which also keeps
    out data that reaches x_{t-1} through the coupling to later cells. One row per origin with
    t - lag - 1 >= burn_in and t + 1 in range; NaN where y_{t+k} is missing or past the end.
    """
    if horizon < 1:
        raise InvalidInputError(f"horizon must be >= 1, got {horizon}")
    if origin_lag < 0:
        raise InvalidInputError(f"origin_lag must be >= 0, got {origin_lag}")
    states = structure.check_state(states)
    if states.shape[0] != ts.length:
        raise InvalidInputError(f"expected {ts.length} states, got {states.shape[0]}")
    T = ts.last_index
    origins = np.arange(max(burn_in, 0), T - origin_lag - 1)
    errors = np.full((origins.size, horizon), np.nan)
    if origins.size == 0:
        return errors
    x = transition_power_apply(structure, states[origins], origin_lag)
    for k in range(1, horizon + 1):
        x = transition_power_apply(structure, x, 1)
        targets = origins + origin_lag + 1 + k
        inside = targets <= T
        observed = np.zeros(origins.size, dtype=bool)
        observed[inside] = ts.mask[targets[inside]]
        errors[observed, k - 1] = ts.values[targets[observed]] - x[observed] @ structure.w
    return errors


def propagate_mean(final_state: np.ndarray, structure: ModelStructure, horizon: int) -> Dict[str, np.ndarray]:
    """Zero-noise path w . A^k x for k = 1..horizon, split into components."""
    if horizon < 1:
        raise InvalidInputError(f"horizon must be >= 1, got {horizon}")
    x = structure.check_state(final_state)
    steps = np.empty((horizon, structure.state_dim))
    for k in range(horizon):
        steps[k] = transition_power_apply(structure, x, k + 1)
    path = {
        "level": steps[:, LEVEL].copy(),
        "trend": steps[:, TREND].copy(),
        "seasonal": steps[:, structure.oldest_season_index].copy(),
    }
    path["y"] = path["level"] + path["trend"] + path["seasonal"]
    return path


def _error_columns(errors: np.ndarray, horizon: int) -> List[np.ndarray]:
    """Observed values per horizon column; a column with none borrows the nearest earlier one."""
    columns: List[np.ndarray] = []
    last = np.empty(0)
    for k in range(horizon):
        column = errors[:, k]
        column = column[np.isfinite(column)]
        if column.size:
            last = column
        columns.append(last)
    if columns and columns[0].size == 0:
        first = next((c for c in columns if c.size), None)
        if first is None:
            raise EmptyPoolError("horizon error pool is empty")
        columns = [c if c.size else first for c in columns]
    return columns


def _simulate_chunk(
    start: int,
    stop: int,
    final_state: np.ndarray,
    pools: NoisePools,
    structure: ModelStructure,
    horizon: int,
    mode: str,
    seed: int,
    residual_source: str,
    scale: float,
    error_columns: Optional[List[np.ndarray]] = None,
) -> PathEnsemble:
    count = stop - start
    n = structure.state_dim
    g_draws = np.empty((count, horizon, n))
    noise = np.zeros((count, horizon))
    for row, path in enumerate(range(start, stop)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, path]))
        g_draws[row] = pools.increments[rng.integers(0, len(pools.increments), size=horizon)]
        if mode != "g_and_eps":
            continue
        if residual_source == "gaussian":
            noise[row] = rng.normal(0.0, scale, size=horizon)
        elif residual_source == "horizon":
            # one whole error path per forecast path keeps the correlation across horizons
            errors = pools.horizon_errors[rng.integers(0, len(pools.horizon_errors)), :horizon].copy()
            for k in np.flatnonzero(np.isnan(errors)):
                errors[k] = error_columns[k][rng.integers(0, error_columns[k].size)]
            noise[row] = errors
        else:
            noise[row] = pools.residuals[rng.integers(0, len(pools.residuals), size=horizon)]

    x = np.broadcast_to(final_state, (count, n)).copy()
    level = np.empty((count, horizon))
    trend = np.empty((count, horizon))
    seasonal = np.empty((count, horizon))
    oldest = structure.oldest_season_index
    for k in range(horizon):
        x = transition_power_apply(structure, x, 1) + g_draws[:, k, :]
        level[:, k] = x[:, LEVEL]
        trend[:, k] = x[:, TREND]
        seasonal[:, k] = x[:, oldest]
    signal = level + trend + seasonal
    return PathEnsemble(level=level, trend=trend, seasonal=seasonal, signal=signal, noise=noise)


def simulate_paths(
    final_state: np.ndarray,
    pools: NoisePools,
    structure: ModelStructure,
    horizon: int,
    n_paths: int,
    mode: str = "g_and_eps",
    seed: int = 0,
    residual_source: str = "empirical",
    workers: int = 1,
) -> PathEnsemble:
    """
    Simulate forecast paths x <- A x + g*, y = w . x (+ eps*).

    Path i draws from its own stream seeded by (seed, i), increments first, so ensembles
    do not depend on ``workers`` and the g-only and g-and-eps modes share increments.
    With ``residual_source="horizon"`` each path takes one row of ``pools.horizon_errors``
    as its noise; gaps in the row are filled from the same horizon column.
    """
    if horizon < 1:
        raise InvalidInputError(f"horizon must be >= 1, got {horizon}")
    if n_paths < 1:
        raise InvalidInputError(f"n_paths must be >= 1, got {n_paths}")
    if mode not in ("g_only", "g_and_eps"):
        raise InvalidInputError(f"mode must be 'g_only' or 'g_and_eps', got {mode!r}")
    if residual_source not in ("horizon", "empirical", "gaussian"):
        raise InvalidInputError(f"unknown residual source {residual_source!r}")
    if len(pools.increments) == 0:
        raise EmptyPoolError("increment pool is empty")
    error_columns = None
    if mode == "g_and_eps" and residual_source == "horizon":
        if not pools.has_horizon_errors:
            raise EmptyPoolError("horizon error pool is empty")
        if pools.horizon_errors.shape[1] < horizon:
            raise InvalidInputError(
                f"horizon errors cover {pools.horizon_errors.shape[1]} steps, {horizon} requested"
            )
        error_columns = _error_columns(pools.horizon_errors, horizon)
    elif mode == "g_and_eps" and len(pools.residuals) == 0:
        raise EmptyPoolError("residual pool is empty")
    final_state = structure.check_state(final_state)
    scale = pools.robust_scale if mode == "g_and_eps" and residual_source == "gaussian" else 0.0

    workers = max(1, min(int(workers), n_paths))
    chunk = math.ceil(n_paths / workers)
    bounds = [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]

    def run(bound):
        return _simulate_chunk(
            bound[0], bound[1], final_state, pools, structure, horizon, mode, seed, residual_source, scale,
            error_columns,
        )

    with tracer.start_as_current_span("escells.simulate_paths") as span:
        span.set_attribute("escells.paths", n_paths)
        span.set_attribute("escells.horizon", horizon)
        if workers == 1:
            parts: List[PathEnsemble] = [run(b) for b in bounds]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(run, bounds))

    return PathEnsemble(
        **{
            name: np.concatenate([getattr(part, name) for part in parts], axis=0)
            for name in ("level", "trend", "seasonal", "signal", "noise")
        }
    )


def quantile_bands(values: np.ndarray, level: float) -> Band:
    """
    Nearest-rank band per horizon over the ensemble axis.

    With P paths and tail mass q = (1 - level) / 2 the lower bound is order statistic
    floor(q P) and the upper bound order statistic ceil((1 - q) P) - 1 (0-based).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] == 0:
        raise EmptyPoolError("cannot take quantiles of an empty ensemble")
    if not 0.0 < level < 1.0:
        raise InvalidInputError(f"level must lie in (0, 1), got {level}")
    P = values.shape[0]
    tail = (1.0 - level) / 2.0
    lo = int(np.clip(np.floor(tail * P + 1e-9), 0, P - 1))
    hi = int(np.clip(np.ceil((1.0 - tail) * P - 1e-9) - 1, 0, P - 1))
    lo, hi = min(lo, hi), max(lo, hi)
    ordered = np.partition(values, sorted({lo, hi}), axis=0)
    return Band(lower=ordered[lo].copy(), upper=ordered[hi].copy())


def summarize_ensemble(
    ensemble: PathEnsemble,
    level: float,
    seed: int,
    mean: Optional[Dict[str, np.ndarray]] = None,
    method: str = "escells",
    settings: Optional[dict] = None,
) -> ForecastResult:
    """
    Inner bands from the noise-free paths, outer bands from the noisy ones.

    Both are plain nearest-rank quantiles; a component without noise gets the same band twice.
    """
    if mean is None:
        mean = {name: ensemble.component(name).mean(axis=0) for name in COMPONENTS}
    inner: Dict[str, Band] = {}
    outer: Dict[str, Band] = {}
    for name in COMPONENTS:
        source = ensemble.signal if name == "y" else ensemble.component(name)
        inner[name] = quantile_bands(source, level)
        outer[name] = inner[name]
    outer["y"] = quantile_bands(ensemble.y, level)
    return ForecastResult(
        horizon=ensemble.horizon,
        level=level,
        n_paths=ensemble.n_paths,
        seed=seed,
        mean=mean,
        inner=inner,
        outer=outer,
        method=method,
        settings=settings or {},
    )


def forecast(
    final_state: np.ndarray,
    pools: NoisePools,
    structure: ModelStructure,
    settings: Optional[ForecastSettings] = None,
) -> ForecastResult:
    """
    Simulate with observation noise once and summarise both bands from the same paths.

    The "horizon" noise source falls back to resampled one-step residuals when the pools
    carry no multi-step errors.
    """
    settings = settings or ForecastSettings()
    residual_source = settings.residual_source
    if residual_source == "horizon" and not pools.has_horizon_errors:
        logger.warning("no multi-step errors in the pools; resampling one-step residuals instead")
        residual_source = "empirical"
    with tracer.start_as_current_span("escells.forecast"):
        ensemble = simulate_paths(
            final_state,
            pools,
            structure,
            horizon=settings.horizon,
            n_paths=settings.n_paths,
            mode="g_and_eps",
            seed=settings.seed,
            residual_source=residual_source,
            workers=settings.workers,
        )
        result = summarize_ensemble(ensemble, settings.level, settings.seed, settings=settings.model_dump())
    logger.info(
        "forecast %d steps from %d paths at level %.3f", settings.horizon, settings.n_paths, settings.level
    )
    return result

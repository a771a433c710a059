"""
Classic additive Holt-Winters and its robust pre-filtered variant (RHW).

States use the same layout as ``escells.model``: (level, trend, s_1, ..., s_p) with s_p the
seasonal value the next observation reads. ``states[t]`` is the state after y_t has been
absorbed; ``x0`` is the state before y_0.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field, field_validator

from escells.errors import EmptyPoolError, InsufficientDataError, InvalidInputError, MissingObservationsError
from escells.forecast import Band, ForecastResult, PathEnsemble, summarize_ensemble
from escells.model import LEVEL, SEASON_START, TREND, ModelStructure, TimeSeries, transition_power_apply

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

HAND_TUNED = (0.05, 0.01, 0.15)


class HWParams(BaseModel):
    """Smoothing parameters and initial state."""

    alpha: float = Field(ge=0.0, le=1.0, description="Level smoothing")
    beta: float = Field(ge=0.0, le=1.0, description="Trend smoothing")
    gamma: float = Field(ge=0.0, le=1.0, description="Seasonal smoothing")
    x0: List[float] = Field(description="State before the first observation")

    @property
    def initial_state(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)

    def check(self, structure: ModelStructure) -> np.ndarray:
        return structure.check_state(self.initial_state)


class RobustFilterParams(BaseModel):
    """Settings of the M-estimation pre-filter."""

    sigma0: float = Field(default=0.05, gt=0.0, description="Initial residual scale")
    lambda_sigma: float = Field(default=0.01, gt=0.0, lt=1.0, description="Scale update rate")
    huber_k: float = Field(default=2.0, gt=0.0, description="Clipping constant in scale units")
    rho_bound: float = Field(default=2.52, gt=0.0, description="Upper bound of the biweight rho")
    scale_to_data: bool = Field(
        default=False,
        description="Interpret sigma0 relative to the robust spread of the series (not idempotent under repeated cleaning)",
    )


class HWFitOptions(BaseModel):
    """Options for the multi-start smoothing parameter search."""

    grid: List[float] = Field(default=[0.0, 0.25, 0.5, 0.75, 1.0], description="Grid values per parameter")
    refine_best: int = Field(default=3, ge=1, description="Grid cells refined by coordinate descent")
    initial_step: float = Field(default=0.125, gt=0.0, le=0.5)
    min_step: float = Field(default=1e-3, gt=0.0)
    max_evaluations: int = Field(default=400, ge=1, description="Evaluation cap per refinement")
    optimize_initial_state: bool = Field(default=True, description="Profile x0 by least squares")
    hand_tuned: bool = Field(default=False, description="Skip the search and use the hand parameters")
    hand_params: Tuple[float, float, float] = Field(default=HAND_TUNED)

    @field_validator("grid")
    @classmethod
    def grid_in_unit_interval(cls, value: List[float]) -> List[float]:
        if not value or any(not 0.0 <= g <= 1.0 for g in value):
            raise ValueError("grid values must lie in [0, 1]")
        return value


@dataclass(frozen=True)
class HWFilterResult:
    states: np.ndarray  # (T + 1, n), state after y_t
    predictions: np.ndarray  # one-step predictions of y_t
    residuals: np.ndarray


@dataclass(frozen=True)
class HWFitResult:
    params: HWParams
    sse: float


@dataclass(frozen=True)
class RobustFilterTrace:
    cleaned: np.ndarray
    predictions: np.ndarray
    scales: np.ndarray  # scale in force when y_t arrives
    clipped: np.ndarray  # bool, residual exceeded huber_k * scale
    states: np.ndarray


def ssoe_gain(params: HWParams, structure: ModelStructure) -> np.ndarray:
    """Gain g with x_t = A x_{t-1} + g eps_t reproducing the smoothing recursions."""
    g = np.zeros(structure.state_dim)
    g[LEVEL] = params.alpha
    g[TREND] = params.alpha * params.beta
    g[SEASON_START] = params.gamma
    return g


def _require_complete(ts: TimeSeries, structure: ModelStructure, check_length: bool = False):
    if ts.observed_count != ts.length:
        raise MissingObservationsError("Holt-Winters baselines need a fully observed series")
    if check_length and ts.length < structure.period + 2:
        raise InsufficientDataError(f"need at least {structure.period + 2} observations, got {ts.length}")


def initial_state_from_data(ts: TimeSeries, structure: ModelStructure) -> np.ndarray:
    """
    Heuristic x0 from the first p + 2 observations.

    Level is the first-period mean moved back to before y_0, trend the mean first
    difference, seasonal the de-meaned first period.
    """
    _require_complete(ts, structure, check_length=True)
    p = structure.period
    head = ts.values[: p + 2]
    trend = float(np.mean(np.diff(head)))
    level = float(np.mean(head[:p])) - trend * (p + 1) / 2.0
    x0 = np.zeros(structure.state_dim)
    x0[LEVEL] = level
    x0[TREND] = trend
    for j in range(p):
        # y_j reads slot n - 1 - j of x0
        x0[structure.state_dim - 1 - j] = head[j] - (level + (j + 1) * trend)
    x0[structure.seasonal_slice] -= np.mean(x0[structure.seasonal_slice])
    return x0


def _run_recursion(y: np.ndarray, x0: np.ndarray, alpha: float, beta: float, gamma: float, p: int):
    T1 = y.shape[0]
    n = p + 2
    states = np.empty((T1, n))
    predictions = np.empty(T1)
    level, trend = x0[LEVEL], x0[TREND]
    seasons = x0[SEASON_START:].copy()  # seasons[0] most recent, seasons[-1] oldest
    for t in range(T1):
        old_season = seasons[-1]
        predictions[t] = level + trend + old_season
        new_level = alpha * (y[t] - old_season) + (1.0 - alpha) * (level + trend)
        new_trend = beta * (new_level - level) + (1.0 - beta) * trend
        new_season = gamma * (y[t] - level - trend) + (1.0 - gamma) * old_season
        seasons = np.concatenate(([new_season], seasons[:-1]))
        level, trend = new_level, new_trend
        states[t, LEVEL] = level
        states[t, TREND] = trend
        states[t, SEASON_START:] = seasons
    return states, predictions


def hw_filter(ts: TimeSeries, structure: ModelStructure, params: HWParams) -> HWFilterResult:
    """Run the smoothing recursions over a fully observed series."""
    _require_complete(ts, structure)
    x0 = params.check(structure)
    states, predictions = _run_recursion(ts.values, x0, params.alpha, params.beta, params.gamma, structure.period)
    return HWFilterResult(states=states, predictions=predictions, residuals=ts.values - predictions)


def ssoe_filter(ts: TimeSeries, structure: ModelStructure, params: HWParams) -> HWFilterResult:
    """Same filter written as x_t = A x_{t-1} + g eps_t."""
    _require_complete(ts, structure)
    g = ssoe_gain(params, structure)
    x = params.check(structure)
    states = np.empty((ts.length, structure.state_dim))
    predictions = np.empty(ts.length)
    for t, y in enumerate(ts.values):
        predictions[t] = structure.w @ x
        x = transition_power_apply(structure, x, 1) + g * (y - predictions[t])
        states[t] = x
    return HWFilterResult(states=states, predictions=predictions, residuals=ts.values - predictions)


def _profiled_sse(y: np.ndarray, structure: ModelStructure, gains: Sequence[float], x0: np.ndarray,
                  optimize_initial_state: bool) -> Tuple[float, np.ndarray]:
    alpha, beta, gamma = gains
    p = structure.period
    with np.errstate(all="ignore"):
        if not optimize_initial_state:
            _, predictions = _run_recursion(y, x0, alpha, beta, gamma, p)
            residuals = y - predictions
            sse = float(residuals @ residuals)
            return (sse if np.isfinite(sse) else float("inf")), x0

        # errors are affine in x0: e(x0) = e(0) - M x0 with M[t] = w' Phi^t, Phi = A - g w'
        _, base = _run_recursion(y, np.zeros(structure.state_dim), alpha, beta, gamma, p)
        base_errors = y - base
        g = np.array([alpha, alpha * beta, gamma] + [0.0] * (p - 1))
        phi = structure.A - np.outer(g, structure.w)
        M = np.empty((y.shape[0], structure.state_dim))
        row = structure.w.copy()
        for t in range(y.shape[0]):
            M[t] = row
            row = row @ phi
        if not (np.all(np.isfinite(M)) and np.all(np.isfinite(base_errors))):
            return float("inf"), x0
        best_x0, *_ = np.linalg.lstsq(M, base_errors, rcond=None)
        residuals = base_errors - M @ best_x0
        sse = float(residuals @ residuals)
    return (sse if np.isfinite(sse) else float("inf")), best_x0


def hw_fit(ts: TimeSeries, structure: ModelStructure, options: Optional[HWFitOptions] = None) -> HWFitResult:
    """
    Least-squares fit of (alpha, beta, gamma) and x0.

    The coarse grid is scanned first, then the best cells are refined by coordinate descent
    with a halving step. The objective is nonconvex, so the result is the best local
    minimiser found.
    """
    options = options or HWFitOptions()
    _require_complete(ts, structure, check_length=True)
    y = ts.values
    heuristic = initial_state_from_data(ts, structure)

    if options.hand_tuned:
        alpha, beta, gamma = options.hand_params
        sse, x0 = _profiled_sse(y, structure, (alpha, beta, gamma), heuristic, False)
        params = HWParams(alpha=alpha, beta=beta, gamma=gamma, x0=x0.tolist())
        logger.info("using hand-tuned Holt-Winters parameters %s (SSE %.6g)", options.hand_params, sse)
        return HWFitResult(params=params, sse=sse)

    def evaluate(gains):
        return _profiled_sse(y, structure, gains, heuristic, options.optimize_initial_state)

    with tracer.start_as_current_span("baselines.hw_fit"):
        scored = []
        for gains in itertools.product(options.grid, repeat=3):
            sse, _ = evaluate(gains)
            scored.append((sse, gains))
        scored.sort(key=lambda item: item[0])

        best_sse, best_gains = scored[0]
        for start_sse, start in scored[: options.refine_best]:
            current = list(start)
            current_sse = start_sse
            step = options.initial_step
            evaluations = 0
            while step >= options.min_step and evaluations < options.max_evaluations:
                improved = False
                for i in range(3):
                    for direction in (1.0, -1.0):
                        trial = list(current)
                        trial[i] = float(np.clip(trial[i] + direction * step, 0.0, 1.0))
                        if trial[i] == current[i]:
                            continue
                        trial_sse, _ = evaluate(trial)
                        evaluations += 1
                        if trial_sse < current_sse:
                            current, current_sse, improved = trial, trial_sse, True
                if not improved:
                    step /= 2.0
            if current_sse < best_sse:
                best_sse, best_gains = current_sse, tuple(current)

    sse, x0 = evaluate(best_gains)
    alpha, beta, gamma = (float(v) for v in best_gains)
    logger.info("Holt-Winters fit: alpha=%.4f beta=%.4f gamma=%.4f SSE=%.6g", alpha, beta, gamma, sse)
    return HWFitResult(params=HWParams(alpha=alpha, beta=beta, gamma=gamma, x0=list(map(float, x0))), sse=sse)


def hw_simulate(
    structure: ModelStructure,
    params: HWParams,
    length: int,
    noise: Union[float, np.ndarray] = 0.0,
    seed: int = 0,
) -> Tuple[TimeSeries, np.ndarray]:
    """
    Generate y_t = w . x_{t-1} + eps_t, x_t = A x_{t-1} + g eps_t.

    ``noise`` is either the standard deviation of Gaussian innovations or the innovations
    themselves. Returns the series and the states after each observation.
    """
    if length < 1:
        raise InvalidInputError(f"length must be >= 1, got {length}")
    if np.ndim(noise) == 0:
        eps = np.random.default_rng(seed).normal(0.0, float(noise), size=length) if noise else np.zeros(length)
    else:
        eps = np.asarray(noise, dtype=float)
        if eps.shape != (length,):
            raise InvalidInputError(f"expected {length} innovations, got shape {eps.shape}")
    g = ssoe_gain(params, structure)
    x = params.check(structure)
    values = np.empty(length)
    states = np.empty((length, structure.state_dim))
    for t in range(length):
        values[t] = structure.w @ x + eps[t]
        x = transition_power_apply(structure, x, 1) + g * eps[t]
        states[t] = x
    return TimeSeries.from_values(values), states


def hw_forecast(
    final_state: np.ndarray,
    structure: ModelStructure,
    params: HWParams,
    residual_pool: Optional[np.ndarray],
    horizon: int,
    n_paths: int = 10000,
    seed: int = 0,
    level: float = 0.99,
    bands: bool = True,
) -> ForecastResult:
    """
    Mean forecast with eps = 0 and bootstrap bands with residuals injected through g.

    Paths emit y = w . x + eps before moving x <- A x + g eps. With ``bands=False`` the
    result carries the mean path only (bands collapse onto it).
    """
    if horizon < 1:
        raise InvalidInputError(f"horizon must be >= 1, got {horizon}")
    x_final = structure.check_state(final_state)
    g = ssoe_gain(params, structure)
    oldest = structure.oldest_season_index

    x = x_final.copy()
    mean_states = np.empty((horizon, structure.state_dim))
    for k in range(horizon):
        mean_states[k] = x
        x = transition_power_apply(structure, x, 1)
    mean = {
        "level": mean_states[:, LEVEL].copy(),
        "trend": mean_states[:, TREND].copy(),
        "seasonal": mean_states[:, oldest].copy(),
    }
    mean["y"] = mean["level"] + mean["trend"] + mean["seasonal"]
    settings = {"alpha": params.alpha, "beta": params.beta, "gamma": params.gamma, "bands": bands}

    if not bands:
        flat = {name: Band(values.copy(), values.copy()) for name, values in mean.items()}
        return ForecastResult(horizon=horizon, level=level, n_paths=0, seed=seed, mean=mean,
                              inner=flat, outer=dict(flat), method="hw", settings=settings)

    pool = np.asarray(residual_pool if residual_pool is not None else [], dtype=float)
    if pool.size == 0:
        raise EmptyPoolError("residual pool is empty")
    if n_paths < 1:
        raise InvalidInputError(f"n_paths must be >= 1, got {n_paths}")

    eps = np.empty((n_paths, horizon))
    for path in range(n_paths):
        rng = np.random.default_rng(np.random.SeedSequence([seed, path]))
        eps[path] = pool[rng.integers(0, pool.size, size=horizon)]

    x = np.broadcast_to(x_final, (n_paths, structure.state_dim)).copy()
    level_paths = np.empty((n_paths, horizon))
    trend_paths = np.empty((n_paths, horizon))
    seasonal_paths = np.empty((n_paths, horizon))
    for k in range(horizon):
        level_paths[:, k] = x[:, LEVEL]
        trend_paths[:, k] = x[:, TREND]
        seasonal_paths[:, k] = x[:, oldest]
        x = transition_power_apply(structure, x, 1) + eps[:, k, None] * g[None, :]
    ensemble = PathEnsemble(
        level=level_paths,
        trend=trend_paths,
        seasonal=seasonal_paths,
        signal=level_paths + trend_paths + seasonal_paths,
        noise=eps,
    )
    return summarize_ensemble(ensemble, level, seed, mean=mean, method="hw", settings=settings)


def _biweight_rho(u: np.ndarray, k: float, bound: float) -> np.ndarray:
    inside = np.abs(u) <= k
    return np.where(inside, bound * (1.0 - (1.0 - (u / k) ** 2) ** 3), bound)


def rhw_filter(
    ts: TimeSeries,
    structure: ModelStructure,
    params: HWParams,
    rparams: Optional[RobustFilterParams] = None,
) -> RobustFilterTrace:
    """
    Holt-Winters driven by a clipped observation stream.

    y_t is replaced by yhat_t + clip(y_t - yhat_t, huber_k * sigma_{t-1}) and the squared scale
    follows sigma_t^2 = lambda * rho(r_t / sigma_{t-1}) * sigma_{t-1}^2 + (1 - lambda) * sigma_{t-1}^2
    with a bounded biweight rho.
    """
    rparams = rparams or RobustFilterParams()
    _require_complete(ts, structure)
    x0 = params.check(structure)
    sigma = rparams.sigma0
    if rparams.scale_to_data:
        spread = 1.4826 * float(np.median(np.abs(ts.values - np.median(ts.values))))
        sigma *= spread if spread > 0 else 1.0

    y = ts.values
    T1 = ts.length
    cleaned = np.empty(T1)
    predictions = np.empty(T1)
    scales = np.empty(T1)
    clipped = np.zeros(T1, dtype=bool)
    states = np.empty((T1, structure.state_dim))
    level, trend = x0[LEVEL], x0[TREND]
    seasons = x0[SEASON_START:].copy()
    k = rparams.huber_k
    for t in range(T1):
        old_season = seasons[-1]
        prediction = level + trend + old_season
        residual = y[t] - prediction
        predictions[t] = prediction
        scales[t] = sigma
        if abs(residual) <= k * sigma:
            cleaned[t] = y[t]
        else:
            clipped[t] = True
            cleaned[t] = prediction + np.sign(residual) * k * sigma
        rho = float(_biweight_rho(np.array(residual / sigma), k, rparams.rho_bound))
        sigma = float(np.sqrt(rparams.lambda_sigma * rho * sigma ** 2 + (1.0 - rparams.lambda_sigma) * sigma ** 2))

        value = cleaned[t]
        new_level = params.alpha * (value - old_season) + (1.0 - params.alpha) * (level + trend)
        new_trend = params.beta * (new_level - level) + (1.0 - params.beta) * trend
        new_season = params.gamma * (value - level - trend) + (1.0 - params.gamma) * old_season
        seasons = np.concatenate(([new_season], seasons[:-1]))
        level, trend = new_level, new_trend
        states[t, LEVEL] = level
        states[t, TREND] = trend
        states[t, SEASON_START:] = seasons

    if clipped.any():
        logger.debug("robust filter clipped %d of %d observations", int(clipped.sum()), T1)
    return RobustFilterTrace(cleaned=cleaned, predictions=predictions, scales=scales, clipped=clipped, states=states)


def rhw_clean(
    ts: TimeSeries,
    structure: ModelStructure,
    params: HWParams,
    rparams: Optional[RobustFilterParams] = None,
) -> TimeSeries:
    """Cleaned copy of the series from ``rhw_filter``."""
    trace_ = rhw_filter(ts, structure, params, rparams)
    return TimeSeries(values=trace_.cleaned, mask=np.ones(ts.length, dtype=bool))

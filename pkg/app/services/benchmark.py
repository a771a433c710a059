"""Forecast accuracy comparison of HW, RHW and ES-Cells on a held-out segment."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from opentelemetry import trace

from baselines.holt_winters import HWFitOptions, RobustFilterParams, hw_filter, hw_fit, hw_forecast, rhw_clean
from escells.analytics import SlidingMape, linear_interpolation, mape_sliding
from escells.errors import InsufficientDataError
from escells.fitting import FitSettings, fit_escells
from escells.forecast import propagate_mean
from escells.model import TimeSeries, build_structure
from escells.solver import SolverConfig

from ..models import BenchmarkSettings

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)


@dataclass
class BenchmarkTable:
    split: int
    horizon: int
    actual: np.ndarray
    forecasts: Dict[str, np.ndarray]
    mape: Dict[str, SlidingMape]
    summary: Dict[str, float] = field(default_factory=dict)


def _complete(ts: TimeSeries) -> TimeSeries:
    if ts.observed_count == ts.length:
        return ts
    return TimeSeries(values=linear_interpolation(ts), mask=np.ones(ts.length, dtype=bool))


def _hw_forecasts(train: TimeSeries, period: int, horizon: int, hand: bool, robust: bool) -> np.ndarray:
    structure = build_structure(period)
    series = _complete(train)
    params = hw_fit(series, structure, HWFitOptions(hand_tuned=hand)).params
    if robust:
        series = rhw_clean(series, structure, params, RobustFilterParams(scale_to_data=True))
    final = hw_filter(series, structure, params).states[-1]
    return hw_forecast(final, structure, params, None, horizon, bands=False).mean["y"]


def _escells_forecast(train: TimeSeries, fit_settings: FitSettings, solver_config: Optional[SolverConfig],
                      horizon: int) -> np.ndarray:
    fit = fit_escells(train, fit_settings, solver_config)
    return propagate_mean(fit.final_state, fit.structure, horizon)["y"]


def _summarize(mape: Dict[str, SlidingMape]) -> Dict[str, float]:
    summary: Dict[str, float] = {}
    for name, m in mape.items():
        summary[f"median_mape_{name}"] = float(np.median(m.values)) if m.values.size else float("nan")

    escells = mape.get("escells")
    if escells is None or not escells.values.size:
        return summary
    by_position = dict(zip(escells.positions.tolist(), escells.values.tolist()))
    for name in ("hw", "rhw"):
        other = mape.get(name)
        if other is None:
            continue
        shared = [(by_position[p], v) for p, v in zip(other.positions.tolist(), other.values.tolist())
                  if p in by_position]
        if not shared:
            continue
        es_values, other_values = (np.array(column) for column in zip(*shared))
        summary[f"fraction_escells_le_{name}"] = float(np.mean(es_values <= other_values))
        with np.errstate(divide="ignore", invalid="ignore"):
            summary[f"median_ratio_{name}_escells"] = float(np.median(other_values / es_values))
    return summary


def run_benchmark(
    ts: TimeSeries,
    period: int,
    settings: Optional[BenchmarkSettings] = None,
    fit_settings: Optional[FitSettings] = None,
    solver_config: Optional[SolverConfig] = None,
    extra_forecasts: Optional[Dict[str, np.ndarray]] = None,
) -> BenchmarkTable:
    """
    Fit every method on ts[:split], forecast ts[split:split + horizon] and score by sliding MAPE.

    ``extra_forecasts`` adds precomputed forecasts (for example an oracle) to the table.
    """
    settings = settings or BenchmarkSettings()
    fit_settings = fit_settings or FitSettings(period=period)
    horizon = settings.horizon
    split = settings.split if settings.split is not None else ts.length - horizon
    if split < period + 2:
        raise InsufficientDataError(f"split {split} leaves fewer than {period + 2} training points")
    if ts.length - split < horizon:
        raise InsufficientDataError(
            f"split {split} leaves {ts.length - split} evaluation points, horizon needs {horizon}"
        )

    train = TimeSeries(values=ts.values[:split], mask=ts.mask[:split])
    actual = ts.values[split:split + horizon]
    hand = settings.hw_mode == "hand"

    jobs: Dict[str, Callable[[], np.ndarray]] = {}
    if "hw" in settings.methods:
        jobs["hw"] = lambda: _hw_forecasts(train, period, horizon, hand, robust=False)
    if "rhw" in settings.methods:
        jobs["rhw"] = lambda: _hw_forecasts(train, period, horizon, hand, robust=True)
    if "escells" in settings.methods:
        jobs["escells"] = lambda: _escells_forecast(train, fit_settings, solver_config, horizon)

    with tracer.start_as_current_span("escells.benchmark") as span:
        span.set_attribute("escells.methods", ",".join(jobs))
        if settings.workers > 1:
            with ThreadPoolExecutor(max_workers=settings.workers) as pool:
                futures = {name: pool.submit(job) for name, job in jobs.items()}
                forecasts = {name: future.result() for name, future in futures.items()}
        else:
            forecasts = {name: job() for name, job in jobs.items()}

    for name, values in (extra_forecasts or {}).items():
        forecasts[name] = np.asarray(values, dtype=float)

    # windows over a missing actual are skipped, positions stay on the horizon grid
    mape = {
        name: mape_sliding(actual, values[:horizon], settings.window)
        for name, values in forecasts.items()
    }
    summary = _summarize(mape)
    logger.info("benchmark over %d held-out points: %s", horizon, summary)
    return BenchmarkTable(split=split, horizon=horizon, actual=actual, forecasts=forecasts, mape=mape,
                          summary=summary)

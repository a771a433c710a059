"""
End-to-end ES-Cells fit: structure, geometry, solve, centre, re-time, pools and components.
"""

import logging
import os
from dataclasses import dataclass, replace
from typing import Literal, Optional

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field

from .analytics import Decomposition, decompose, impute
from .forecast import (
    ForecastResult,
    ForecastSettings,
    NoisePools,
    build_pools,
    extract_horizon_errors,
    extract_residuals,
    forecast,
)
from .model import CellGeometry, ModelStructure, TimeSeries, build_cell_geometry, build_structure
from .solver import SolverConfig, SolverStats, assemble, center, solve, ssoe_states

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)


class FitSettings(BaseModel):
    """Model settings for one ES-Cells fit."""

    period: int = Field(ge=2, description="Seasonal period p")
    half_width: Optional[int] = Field(default=None, ge=1, description="Window half-width K, defaults to p")
    decay: float = Field(default=0.9, gt=0.0, lt=1.0, description="Geometric decay of the window weights")
    lambda1: float = Field(default=1.0, gt=0.0, description="Seasonal total-variation weight")
    lambda2: float = Field(default=10.0, gt=0.0, description="Dynamics coupling weight")
    data_loss: Literal["l1", "l2"] = Field(default="l1", description="Cell data loss")
    burn_in: Optional[int] = Field(default=None, ge=0, description="Pool exclusion at each end, defaults to K")
    origin_lag: Optional[int] = Field(
        default=None, ge=0, description="Steps between a multi-step error origin and its state, defaults to K"
    )

    @property
    def window(self) -> int:
        return self.half_width if self.half_width is not None else self.period

    @property
    def pool_burn_in(self) -> int:
        return self.burn_in if self.burn_in is not None else self.window

    @property
    def error_lag(self) -> int:
        return self.origin_lag if self.origin_lag is not None else self.window

    @classmethod
    def from_env(cls, period: int, **overrides) -> "FitSettings":
        """Defaults from ESCELLS_LAMBDA1 / ESCELLS_LAMBDA2 / ESCELLS_DECAY, then explicit overrides."""
        values = {"period": period}
        if os.getenv("ESCELLS_LAMBDA1"):
            values["lambda1"] = float(os.getenv("ESCELLS_LAMBDA1", "1.0"))
        if os.getenv("ESCELLS_LAMBDA2"):
            values["lambda2"] = float(os.getenv("ESCELLS_LAMBDA2", "10.0"))
        if os.getenv("ESCELLS_DECAY"):
            values["decay"] = float(os.getenv("ESCELLS_DECAY", "0.9"))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class FitResult:
    settings: FitSettings
    structure: ModelStructure
    geometry: CellGeometry
    ts: TimeSeries
    raw_states: np.ndarray  # x_hat_{-K..T-K}
    centered: np.ndarray  # x_check_{0..T}
    states: np.ndarray  # re-timed, row t predicts y_{t+1}
    prior_state: np.ndarray  # predicts y_0
    residual_times: np.ndarray
    residuals: np.ndarray
    pools: NoisePools
    decomposition: Decomposition
    stats: SolverStats

    @property
    def fitted(self) -> np.ndarray:
        """One-step fitted values w . x_{t-1} for t = 0..T."""
        previous = np.vstack([self.prior_state[None, :], self.states[:-1]])
        return previous @ self.structure.w

    @property
    def final_state(self) -> np.ndarray:
        """State forecasts are conditioned on, x_check_T."""
        return self.centered[-1]

    def imputed(self) -> TimeSeries:
        return impute(self.ts, self.states, self.structure, self.prior_state)

    def forecast(self, settings: Optional[ForecastSettings] = None) -> ForecastResult:
        """Forecast from the final state, with multi-step error paths for the requested horizon."""
        settings = settings or ForecastSettings()
        pools = self.pools
        if settings.residual_source == "horizon":
            errors = extract_horizon_errors(
                self.ts, self.states, self.structure, settings.horizon,
                self.settings.error_lag, self.settings.pool_burn_in,
            )
            pools = replace(pools, horizon_errors=errors)
        return forecast(self.final_state, pools, self.structure, settings)

    def to_dict(self) -> dict:
        return {
            "settings": self.settings.model_dump(),
            "series": {
                "values": [None if np.isnan(v) else float(v) for v in self.ts.values],
                "mask": self.ts.mask.astype(int).tolist(),
            },
            "raw_states": self.raw_states.tolist(),
            "centered": self.centered.tolist(),
            "states": self.states.tolist(),
            "prior_state": self.prior_state.tolist(),
            "residuals": {"times": self.residual_times.tolist(), "values": self.residuals.tolist()},
            "pools": self.pools.to_dict(),
            "decomposition": self.decomposition.to_dict(),
            "solver": self.stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FitResult":
        settings = FitSettings(**data["settings"])
        structure = build_structure(settings.period)
        geometry = build_cell_geometry(structure, settings.window, settings.decay)
        series = data["series"]
        values = np.array([np.nan if v is None else v for v in series["values"]], dtype=float)
        ts = TimeSeries(values=values, mask=np.asarray(series["mask"], dtype=bool))
        solver = dict(data["solver"])
        stats = SolverStats(
            iterations=solver["iterations"],
            residual=solver["residual"],
            objective=solver["objective"],
            objective_trace=[tuple(item) for item in solver.get("objective_trace", [])],
            residual_trace=[tuple(item) for item in solver.get("residual_trace", [])],
            wall_time=solver.get("wall_time", 0.0),
            converged=solver["converged"],
            status=solver["status"],
            rho=solver.get("rho", 0.0),
        )
        return cls(
            settings=settings,
            structure=structure,
            geometry=geometry,
            ts=ts,
            raw_states=np.asarray(data["raw_states"], dtype=float),
            centered=np.asarray(data["centered"], dtype=float),
            states=np.asarray(data["states"], dtype=float),
            prior_state=np.asarray(data["prior_state"], dtype=float),
            residual_times=np.asarray(data["residuals"]["times"], dtype=int),
            residuals=np.asarray(data["residuals"]["values"], dtype=float),
            pools=NoisePools.from_dict(data["pools"], structure.state_dim),
            decomposition=Decomposition.from_dict(data["decomposition"]),
            stats=stats,
        )


def fit_escells(
    ts: TimeSeries,
    settings: FitSettings,
    solver_config: Optional[SolverConfig] = None,
) -> FitResult:
    """
    Fit the linked ES-Cells model to a (possibly gappy) series.

    Args:
        ts: Observations with missingness mask
        settings: Period, window and regularisation weights
        solver_config: Solver settings, defaults from the environment

    Returns:
        FitResult with raw, centred and re-timed states, pools and decomposition
    """
    solver_config = solver_config or SolverConfig.from_env()
    structure = build_structure(settings.period)
    geometry = build_cell_geometry(structure, settings.window, settings.decay)

    with tracer.start_as_current_span("escells.fit") as span:
        span.set_attribute("escells.length", ts.length)
        span.set_attribute("escells.period", settings.period)
        problem = assemble(
            ts, structure, geometry, settings.lambda1, settings.lambda2, data_loss=settings.data_loss
        )
        raw, stats = solve(problem, solver_config)
        centered = center(raw, structure, geometry.half_width)
        prior, states = ssoe_states(centered, structure)
        times, residuals = extract_residuals(ts, states, structure, prior)
        pools = build_pools(ts, states, structure, settings.pool_burn_in, prior)
        decomposition = decompose(states, structure)

    logger.info(
        "fitted %d points (p=%d, K=%d): %s after %d iterations",
        ts.length, settings.period, geometry.half_width, stats.status, stats.iterations,
    )
    return FitResult(
        settings=settings,
        structure=structure,
        geometry=geometry,
        ts=ts,
        raw_states=raw,
        centered=centered,
        states=states,
        prior_state=prior,
        residual_times=times,
        residuals=residuals,
        pools=pools,
        decomposition=decomposition,
        stats=stats,
    )

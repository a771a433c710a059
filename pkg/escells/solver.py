"""
Global ES-Cells problem: one robust cell fit per window, linked by the dynamics.

The objective over the window states x_s, s = -K..T-K, is

    sum_s ||D_s (Y_s - A_cell x_s)||_1 + lambda1 |b . x_s|
      + sum_s lambda2 ||A^K (A x_s - x_{s+1})||_2^2

where window s covers y_s .. y_{s+2K} and A_cell stacks the design rows a_0..a_2K.
It is solved by ADMM: both one-norm terms go through their proximal maps and the
coupling quadratic through a banded Cholesky factorisation of the block-tridiagonal
x-update system.
"""

import logging
import os
import time
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.optimize import lsq_linear

from .errors import DimensionMismatchError, InvalidInputError
from .model import (
    LEVEL,
    TREND,
    CellGeometry,
    ModelStructure,
    TimeSeries,
    transition_matrix_power,
    transition_power_apply,
    window_value_matrix,
    window_weight_matrix,
)

logger = logging.getLogger(__name__)
tracer = trace.get_tracer(__name__)

StateSequence = np.ndarray  # shape (T + 1, n), row i holds x_{i - K}


class SolverConfig(BaseModel):
    """Settings for the splitting solver."""

    max_iterations: int = Field(default=5000, ge=1, description="Iteration cap for ADMM")
    tolerance: float = Field(default=1e-6, gt=0.0, description="Target optimality residual")
    rho: float = Field(default=1.0, gt=0.0, description="Initial augmented Lagrangian parameter")
    proximal_weight: float = Field(default=1e-8, gt=0.0, description="Weight of the x-update proximal term")
    kink_tolerance: float = Field(
        default=1e-6, gt=0.0, description="Residuals below this (relative to the data scale) count as kinks"
    )
    check_every: int = Field(default=25, ge=1, description="Iterations between convergence checks")
    trace_every: int = Field(default=10, ge=1, description="Down-sampling of the objective trace")
    init: Literal["data", "zero"] = Field(default="data", description="Starting point")
    adapt_rho: bool = Field(default=True, description="Residual balancing of rho")
    record_residuals: bool = Field(
        default=False, description="Record the optimality residual of the averaged iterates at each check"
    )
    seed: int = Field(default=0, description="Recorded for reproducibility; the solver itself is deterministic")

    model_config = {"frozen": True}

    @classmethod
    def from_env(cls, **overrides) -> "SolverConfig":
        """Defaults from ESCELLS_* environment variables, then explicit overrides."""
        values = {}
        if os.getenv("ESCELLS_MAX_ITERATIONS"):
            values["max_iterations"] = int(os.getenv("ESCELLS_MAX_ITERATIONS", "5000"))
        if os.getenv("ESCELLS_TOLERANCE"):
            values["tolerance"] = float(os.getenv("ESCELLS_TOLERANCE", "1e-6"))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class ProblemSpec:
    structure: ModelStructure
    geometry: CellGeometry
    ts: TimeSeries
    lambda1: float
    lambda2: float
    data_loss: str
    weights: np.ndarray  # (T + 1, 2K + 1), window_weights for each window state
    targets: np.ndarray  # (T + 1, 2K + 1), observations with zeros where weights vanish
    power_k: np.ndarray  # A^K
    power_k1: np.ndarray  # A^(K + 1)
    data_scale: float

    @property
    def num_states(self) -> int:
        return self.weights.shape[0]

    @property
    def state_dim(self) -> int:
        return self.structure.state_dim

    @property
    def window_starts(self) -> np.ndarray:
        """Time index s of each window state x_s."""
        K = self.geometry.half_width
        return np.arange(-K, self.num_states - K)


@dataclass
class SolverStats:
    iterations: int = 0
    residual: float = float("inf")
    objective: float = float("inf")
    objective_trace: List[Tuple[int, float]] = field(default_factory=list)
    residual_trace: List[Tuple[int, float]] = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False
    status: str = "not_started"
    rho: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "objective": self.objective,
            "objective_trace": [[k, v] for k, v in self.objective_trace],
            "residual_trace": [[k, v] for k, v in self.residual_trace],
            "wall_time": self.wall_time,
            "converged": self.converged,
            "status": self.status,
            "rho": self.rho,
        }


def assemble(
    ts: TimeSeries,
    structure: ModelStructure,
    geometry: CellGeometry,
    lambda1: float = 1.0,
    lambda2: float = 10.0,
    data_loss: str = "l1",
    require_data: bool = True,
) -> ProblemSpec:
    """
    Cache the per-window weights and targets and the powers of A used by the coupling term.

    Args:
        ts: Observed series, t = 0..T
        structure: Holt-Winters structure
        geometry: Cell geometry (K, weights, design rows)
        lambda1: Weight of the seasonal total-variation term
        lambda2: Weight of the dynamics coupling
        data_loss: "l1" for the robust cell loss, "l2" for weighted least squares
        require_data: Reject series with fewer than p + 2 observations
    """
    if lambda1 <= 0 or lambda2 <= 0:
        raise InvalidInputError(f"lambda1 and lambda2 must be positive, got {lambda1}, {lambda2}")
    if data_loss not in ("l1", "l2"):
        raise InvalidInputError(f"data_loss must be 'l1' or 'l2', got {data_loss!r}")
    if require_data:
        ts.require_observed(structure.period + 2)

    K = geometry.half_width
    # window state x_s is centred at s + K
    centers = np.arange(ts.length)
    weights = window_weight_matrix(geometry, ts, centers)
    targets = window_value_matrix(geometry, ts, centers)
    targets = np.where(weights > 0, targets, 0.0)

    observed = ts.values[ts.mask]
    data_scale = 1.0 + (float(np.median(np.abs(observed))) if observed.size else 0.0)

    for array in (weights, targets):
        array.setflags(write=False)
    return ProblemSpec(
        structure=structure,
        geometry=geometry,
        ts=ts,
        lambda1=float(lambda1),
        lambda2=float(lambda2),
        data_loss=data_loss,
        weights=weights,
        targets=targets,
        power_k=transition_matrix_power(structure, K),
        power_k1=transition_matrix_power(structure, K + 1),
        data_scale=data_scale,
    )


def _check_states(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.num_states, problem.state_dim):
        raise DimensionMismatchError(
            f"expected states of shape {(problem.num_states, problem.state_dim)}, got {x.shape}"
        )
    return x


def _coupling_residual(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    # A^K (A x_s - x_{s+1}) for s = 0..N-2
    return x[:-1] @ problem.power_k1.T - x[1:] @ problem.power_k.T


def _coupling_gradient(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    r = _coupling_residual(problem, x)
    grad = np.zeros_like(x)
    grad[:-1] += 2.0 * problem.lambda2 * r @ problem.power_k1
    grad[1:] -= 2.0 * problem.lambda2 * r @ problem.power_k
    return grad


def objective(problem: ProblemSpec, x: StateSequence) -> float:
    """Value of the linked objective at the state sequence x."""
    x = _check_states(problem, x)
    residual = problem.targets - x @ problem.geometry.design.T
    if problem.data_loss == "l1":
        data = float(np.sum(problem.weights * np.abs(residual)))
    else:
        data = float(np.sum(problem.weights * residual ** 2))
    seasonal = problem.lambda1 * float(np.sum(np.abs(x @ problem.structure.b)))
    coupling = problem.lambda2 * float(np.sum(_coupling_residual(problem, x) ** 2)) if len(x) > 1 else 0.0
    return data + seasonal + coupling


def minimum_norm_subgradient(problem: ProblemSpec, x: StateSequence, kink_tolerance: float = 1e-6) -> np.ndarray:
    """
    Minimum-norm element of the objective's subdifferential at x, one row per window state.

    One-norm terms whose argument is within the kink tolerance (relative to the data scale)
    contribute their whole interval; the rest contribute their sign. The subdifferential
    separates over window states, so each row comes from a small box-constrained
    least-squares solve over the active terms.
    """
    x = _check_states(problem, x)
    design = problem.geometry.design
    b = problem.structure.b
    kink = problem.data_scale * kink_tolerance

    smooth = _coupling_gradient(problem, x) if len(x) > 1 else np.zeros_like(x)
    residual = problem.targets - x @ design.T
    weights = problem.weights
    if problem.data_loss == "l2":
        smooth = smooth - 2.0 * (weights * residual) @ design
        active_data = np.zeros(weights.shape, dtype=bool)
    else:
        active_data = (weights > 0) & (np.abs(residual) <= kink)
        signs = np.where(active_data, 0.0, np.sign(residual))
        smooth = smooth - (weights * signs) @ design

    tv = x @ b
    active_tv = np.abs(tv) <= kink
    smooth = smooth + problem.lambda1 * np.where(active_tv, 0.0, np.sign(tv))[:, None] * b[None, :]

    subgradient = smooth.copy()
    for s in range(problem.num_states):
        columns = [weights[s, j] * design[j] for j in np.flatnonzero(active_data[s])]
        if active_tv[s]:
            columns.append(problem.lambda1 * b)
        if not columns:
            continue
        C = np.column_stack(columns)
        solution = lsq_linear(C, -smooth[s], bounds=(-1.0, 1.0), method="trf", tol=1e-12)
        subgradient[s] = smooth[s] + C @ solution.x
    return subgradient


def optimality_residual(problem: ProblemSpec, x: StateSequence, kink_tolerance: float = 1e-6) -> float:
    """Norm of the minimum-norm subgradient at x, divided by 1 + ||x||."""
    g = minimum_norm_subgradient(problem, x, kink_tolerance)
    return float(np.linalg.norm(g) / (1.0 + np.linalg.norm(x)))


def initial_states(problem: ProblemSpec, mode: str = "data") -> StateSequence:
    """Crude local fit: weighted window mean for level, weighted local slope for trend, zero seasonal."""
    N, n = problem.num_states, problem.state_dim
    x = np.zeros((N, n))
    if mode == "zero":
        return x
    K = problem.geometry.half_width
    weights = problem.weights
    offsets = np.arange(2 * K + 1, dtype=float)
    total = weights.sum(axis=1)
    observed = problem.ts.values[problem.ts.mask]
    fallback = float(observed.mean()) if observed.size else 0.0
    has_data = total > 0
    safe_total = np.where(has_data, total, 1.0)
    mean = np.where(has_data, (weights * problem.targets).sum(axis=1) / safe_total, fallback)
    centre = np.where(has_data, (weights * offsets).sum(axis=1) / safe_total, K)
    spread = (weights * (offsets[None, :] - centre[:, None]) ** 2).sum(axis=1)
    covariance = (weights * (offsets[None, :] - centre[:, None]) * (problem.targets - mean[:, None])).sum(axis=1)
    slope = np.where(spread > 1e-12, covariance / np.where(spread > 1e-12, spread, 1.0), 0.0)
    # a_j . x = level + (j + 1) trend + seasonal, so the level sits one step before offset 0
    x[:, TREND] = slope
    x[:, LEVEL] = mean - (centre + 1.0) * slope
    return x


def _soft_threshold(v: np.ndarray, kappa) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


class _BandedSystem:
    """Block-tridiagonal x-update matrix stored in LAPACK lower banded form."""

    def __init__(self, problem: ProblemSpec, rho: float, proximal_weight: float):
        N, n = problem.num_states, problem.state_dim
        G = problem.geometry.design
        b = problem.structure.b
        P0, P1 = problem.power_k, problem.power_k1
        lam = 2.0 * problem.lambda2

        diag = np.broadcast_to(rho * (G.T @ G + np.outer(b, b)) + proximal_weight * np.eye(n), (N, n, n)).copy()
        if N > 1:
            diag[:-1] += lam * P1.T @ P1
            diag[1:] += lam * P0.T @ P0
        lower = np.broadcast_to(-lam * P0.T @ P1, (max(N - 1, 0), n, n))

        ab = np.zeros((2 * n, N * n))
        rows, cols = np.tril_indices(n)
        block_start = np.arange(N)[:, None] * n
        ab[np.broadcast_to(rows - cols, (N, rows.size)), block_start + cols[None, :]] = diag[:, rows, cols]
        if N > 1:
            a_idx, c_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            a_idx, c_idx = a_idx.ravel(), c_idx.ravel()
            offsets = np.broadcast_to(n + a_idx - c_idx, (N - 1, a_idx.size))
            ab[offsets, block_start[:-1] + c_idx[None, :]] = lower[:, a_idx, c_idx]
        self.factor = cholesky_banded(ab, lower=True)
        self.shape = (N, n)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return cho_solve_banded((self.factor, True), rhs.ravel()).reshape(self.shape)


def _normalise(problem: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Move x along the flat direction so the seasonal slots average to zero."""
    shift = float(np.mean(x[:, problem.structure.seasonal_slice]))
    return x + shift * problem.structure.nullspace_direction()[None, :]


def solve(
    problem: ProblemSpec,
    config: Optional[SolverConfig] = None,
    x0: Optional[StateSequence] = None,
) -> Tuple[StateSequence, SolverStats]:
    """
    Minimise the linked objective.

    Returns the raw window states x_hat (row i is x_{i-K}) and the solver statistics. When the
    optimality residual does not reach the tolerance within max_iterations, the best checked
    iterate is returned with ``stats.converged = False``.
    """
    config = config or SolverConfig()
    started = time.perf_counter()
    stats = SolverStats(rho=config.rho)

    def residual_at(states: np.ndarray) -> float:
        return optimality_residual(problem, states, config.kink_tolerance)

    with tracer.start_as_current_span("escells.solve") as span:
        span.set_attribute("escells.states", problem.num_states)
        span.set_attribute("escells.state_dim", problem.state_dim)

        G = problem.geometry.design
        b = problem.structure.b
        weights = problem.weights
        targets = problem.targets
        observed = weights > 0
        delta = config.proximal_weight

        x = _check_states(problem, x0) if x0 is not None else initial_states(problem, config.init)
        x = x.copy()
        z = x @ G.T
        q = x @ b
        u = np.zeros_like(z)
        v = np.zeros_like(q)

        rho = config.rho
        system = _BandedSystem(problem, rho, delta)
        admm_tol = config.tolerance
        running_sum = np.zeros_like(x)
        best_x, best_value = x.copy(), objective(problem, x)

        iteration = 0
        for iteration in range(1, config.max_iterations + 1):
            rhs = rho * ((z - u) @ G + (q - v)[:, None] * b[None, :]) + delta * x
            x = system.solve(rhs)

            gx = x @ G.T
            bx = x @ b
            c = gx + u
            z_old, q_old = z, q
            # entries with zero weight are left at c, so missing values are never read
            if problem.data_loss == "l1":
                z = np.where(observed, targets + _soft_threshold(c - targets, weights / rho), c)
            else:
                z = np.where(observed, (2.0 * weights * targets + rho * c) / (2.0 * weights + rho), c)
            q = _soft_threshold(bx + v, problem.lambda1 / rho)
            u = u + gx - z
            v = v + bx - q
            running_sum += x

            if iteration % config.trace_every == 0:
                stats.objective_trace.append((iteration, objective(problem, x)))

            if iteration % config.check_every != 0 and iteration != config.max_iterations:
                continue

            primal = np.sqrt(np.sum((gx - z) ** 2) + np.sum((bx - q) ** 2))
            dual = rho * np.linalg.norm((z - z_old) @ G + (q - q_old)[:, None] * b[None, :])
            size = np.sqrt(z.size + q.size)
            eps_primal = size * admm_tol * problem.data_scale + admm_tol * max(
                np.sqrt(np.sum(gx ** 2) + np.sum(bx ** 2)), np.sqrt(np.sum(z ** 2) + np.sum(q ** 2))
            )
            eps_dual = size * admm_tol * problem.data_scale + admm_tol * rho * np.linalg.norm(
                u @ G + v[:, None] * b[None, :]
            )

            value = objective(problem, x)
            if value < best_value:
                best_x, best_value = x.copy(), value
            if config.record_residuals:
                stats.residual_trace.append((iteration, residual_at(running_sum / iteration)))
            logger.debug(
                "iteration %d: objective %.6g primal %.3g dual %.3g rho %.3g",
                iteration, value, primal, dual, rho,
            )

            if primal <= eps_primal and dual <= eps_dual:
                candidate = _normalise(problem, x)
                residual = residual_at(candidate)
                if residual <= config.tolerance:
                    x = candidate
                    stats.converged = True
                    stats.residual = residual
                    break
                admm_tol = max(admm_tol / 10.0, 1e-15)

            if config.adapt_rho:
                scale = None
                if primal > 10.0 * dual:
                    scale = 2.0
                elif dual > 10.0 * primal:
                    scale = 0.5
                if scale is not None:
                    rho *= scale
                    u = u / scale
                    v = v / scale
                    system = _BandedSystem(problem, rho, delta)

        stats.iterations = iteration
        if not stats.converged:
            x = _normalise(problem, best_x)
            stats.residual = residual_at(x)
        stats.objective = objective(problem, x)
        stats.status = "converged" if stats.converged else "max_iterations"

        stats.rho = rho
        stats.wall_time = time.perf_counter() - started
        span.set_attribute("escells.iterations", stats.iterations)
        span.set_attribute("escells.converged", stats.converged)

    if stats.converged:
        logger.info(
            "solver converged in %d iterations (objective %.6g, residual %.3g)",
            stats.iterations, stats.objective, stats.residual,
        )
    else:
        logger.warning(
            "solver stopped after %d iterations without reaching tolerance %.3g (residual %.3g)",
            stats.iterations, config.tolerance, stats.residual,
        )
    return x, stats


def reference_solve(
    problem: ProblemSpec,
    iterations: int = 1_000_000,
    step: Optional[float] = None,
    x0: Optional[StateSequence] = None,
) -> Tuple[StateSequence, float]:
    """
    Slow proximal subgradient method, kept as an independent oracle for the ADMM solver.

    The seasonal one-norm term is handled by its proximal map, the data term by a
    subgradient and the coupling by its gradient, with steps step / sqrt(k + 1).
    Returns the best iterate and its objective value.
    """
    G = problem.geometry.design
    b = problem.structure.b
    if step is None:
        lipschitz = 8.0 * problem.lambda2 * max(
            np.linalg.norm(problem.power_k, 2), np.linalg.norm(problem.power_k1, 2)
        ) ** 2
        step = 1.0 / (lipschitz + float(np.sum(problem.geometry.weights)) * np.linalg.norm(G, 2))
    x = np.zeros((problem.num_states, problem.state_dim)) if x0 is None else np.array(x0, dtype=float)
    best_x, best_value = x.copy(), objective(problem, x)
    b_norm2 = float(b @ b)

    for k in range(iterations):
        residual = problem.targets - x @ G.T
        if problem.data_loss == "l1":
            grad = -(problem.weights * np.sign(residual)) @ G
        else:
            grad = -2.0 * (problem.weights * residual) @ G
        if len(x) > 1:
            grad += _coupling_gradient(problem, x)
        eta = step / np.sqrt(k + 1.0)
        y = x - eta * grad
        tau = eta * problem.lambda1
        theta = np.clip((y @ b) / (tau * b_norm2), -1.0, 1.0)
        x = y - tau * theta[:, None] * b[None, :]
        if k % 100 == 99 or k == iterations - 1:
            value = objective(problem, x)
            if value < best_value:
                best_x, best_value = x.copy(), value
    return best_x, best_value


def center(x_hat: StateSequence, structure: ModelStructure, K: int) -> StateSequence:
    """x_check_t = A^K x_hat_{t-K} for t = 0..T (row i of x_hat is x_hat_{i-K})."""
    return transition_power_apply(structure, np.asarray(x_hat, dtype=float), K)


def ssoe_states(centered: StateSequence, structure: ModelStructure) -> Tuple[np.ndarray, StateSequence]:
    """
    Re-time centred states to the single-source-of-error convention.

    ``centered[t]`` predicts y_t, whereas the forecasting and analytics formulas need the state
    that predicts y_{t+1} at index t. Returns the state preceding the series (predicts y_0)
    and the re-timed sequence for t = 0..T, the last entry being A x_check_T.
    """
    centered = structure.check_state(centered)
    tail = transition_power_apply(structure, centered[-1], 1)
    return centered[0].copy(), np.vstack([centered[1:], tail[None, :]])

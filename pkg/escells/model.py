"""
Holt-Winters state structure, ES cell geometry and window operators.

The state is ordered (level, trend, s_1, ..., s_p) where s_1 is the most recent
seasonal value and s_p the oldest one, i.e. the one the next observation uses.
"""

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, InsufficientDataError, InvalidInputError

LEVEL = 0
TREND = 1
SEASON_START = 2


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly indexed observations t = 0..T with a missingness mask.

    ``values`` holds NaN wherever ``mask`` is False.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 1 or mask.shape != values.shape:
            raise DimensionMismatchError(
                f"values and mask must be 1-d of equal length, got {values.shape} and {mask.shape}"
            )
        if np.any(np.isnan(values[mask])):
            raise InvalidInputError("observed positions must hold finite values")
        values[~mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_values(cls, values: Iterable[Optional[float]]) -> "TimeSeries":
        """Build a series, treating None and NaN entries as missing."""
        array = np.array([np.nan if v is None else v for v in values], dtype=float)
        return cls(values=array, mask=~np.isnan(array))

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    @property
    def last_index(self) -> int:
        """T, the index of the final observation slot."""
        return self.length - 1

    @property
    def observed_count(self) -> int:
        return int(self.mask.sum())

    @property
    def indicators(self) -> np.ndarray:
        """The d_t indicators as floats."""
        return self.mask.astype(float)

    def with_missing(self, indices: Iterable[int]) -> "TimeSeries":
        """Return a copy with the given positions marked missing."""
        idx = np.asarray(list(indices), dtype=int)
        mask = self.mask.copy()
        mask[idx] = False
        values = self.values.copy()
        values[idx] = np.nan
        return TimeSeries(values=values, mask=mask)

    def filled(self, fill_value: float = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, fill_value)

    def require_observed(self, minimum: int):
        if self.observed_count < minimum:
            raise InsufficientDataError(
                f"need at least {minimum} observed values, got {self.observed_count}"
            )


@dataclass(frozen=True)
class ModelStructure:
    """Additive Holt-Winters structure in single-source-of-error form."""

    period: int
    state_dim: int
    w: np.ndarray
    A: np.ndarray
    b: np.ndarray

    @property
    def seasonal_slice(self) -> slice:
        return slice(SEASON_START, self.state_dim)

    @property
    def oldest_season_index(self) -> int:
        return self.state_dim - 1

    def check_state(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise DimensionMismatchError(
                f"state vectors must have dimension {self.state_dim}, got {x.shape[-1]}"
            )
        return x

    def nullspace_direction(self) -> np.ndarray:
        """Direction that shifts level up and every seasonal slot down by the same amount.

        It is invisible to w, b and the dynamics, so objectives built from them are flat along it.
        """
        v = np.zeros(self.state_dim)
        v[LEVEL] = 1.0
        v[self.seasonal_slice] = -1.0
        return v


@dataclass(frozen=True)
class CellGeometry:
    """Window half-width, unimodal weights and the stacked design matrix of one ES cell."""

    half_width: int
    decay: float
    weights: np.ndarray
    design: np.ndarray

    @property
    def window_size(self) -> int:
        return 2 * self.half_width + 1

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half_width, self.half_width + 1)


def build_structure(p: int) -> ModelStructure:
    """
    Build w, A and b for an additive Holt-Winters model with period p.

    Args:
        p: Seasonal period, at least 2

    Returns:
        ModelStructure with state dimension p + 2
    """
    if isinstance(p, bool) or int(p) != p or p < 2:
        raise InvalidInputError(f"period must be an integer >= 2, got {p!r}")
    p = int(p)
    n = p + 2

    A = np.zeros((n, n))
    A[LEVEL, LEVEL] = 1.0
    A[LEVEL, TREND] = 1.0
    A[TREND, TREND] = 1.0
    # oldest seasonal slot becomes the most recent one, the rest move down
    A[SEASON_START, n - 1] = 1.0
    for i in range(SEASON_START + 1, n):
        A[i, i - 1] = 1.0

    w = np.zeros(n)
    w[LEVEL] = 1.0
    w[TREND] = 1.0
    w[n - 1] = 1.0

    b = np.zeros(n)
    b[SEASON_START] = 1.0
    b[SEASON_START + 1] = -1.0

    return ModelStructure(period=p, state_dim=n, w=_frozen(w), A=_frozen(A), b=_frozen(b))


def transition_power_apply(structure: ModelStructure, x: np.ndarray, k: int) -> np.ndarray:
    """Return A^k x without forming A^k.

    ``x`` may be a single state or a stack of states along the last axis. Negative ``k``
    applies the inverse transition.
    """
    x = structure.check_state(x)
    k = int(k)
    out = np.array(x, dtype=float, copy=True)
    if k == 0:
        return out
    out[..., LEVEL] = x[..., LEVEL] + k * x[..., TREND]
    # the seasonal block is a cyclic shift of order p
    out[..., structure.seasonal_slice] = np.roll(x[..., structure.seasonal_slice], k, axis=-1)
    return out


def transition_power_solve(structure: ModelStructure, x: np.ndarray) -> np.ndarray:
    """Solve A z = x."""
    return transition_power_apply(structure, x, -1)


def transition_matrix_power(structure: ModelStructure, k: int) -> np.ndarray:
    """Dense A^k, for the small n x n blocks the solver caches."""
    return transition_power_apply(structure, np.eye(structure.state_dim), k).T


def design_row(structure: ModelStructure, j: int) -> np.ndarray:
    """Row a_j with a_j . x = w . (A^j x)."""
    j = int(j)
    if j < 0:
        raise InvalidInputError(f"design row index must be >= 0, got {j}")
    p = structure.period
    row = np.zeros(structure.state_dim)
    row[LEVEL] = 1.0
    row[TREND] = j + 1.0
    row[SEASON_START + (p - 1 - j) % p] = 1.0
    return row


def build_cell_geometry(structure: ModelStructure, K: int, decay: float = 0.9) -> CellGeometry:
    """
    Weights alpha_r = decay^|r| for r = -K..K and the design matrix rows a_0..a_2K.

    Args:
        structure: Model structure the design rows are built from
        K: Half-width of the window, at least 1
        decay: Geometric decay of the weights, strictly between 0 and 1
    """
    if isinstance(K, bool) or int(K) != K or K < 1:
        raise InvalidInputError(f"half-width K must be an integer >= 1, got {K!r}")
    if not 0.0 < decay < 1.0:
        raise InvalidInputError(f"decay must lie in (0, 1), got {decay}")
    K = int(K)
    offsets = np.arange(-K, K + 1)
    weights = float(decay) ** np.abs(offsets)
    design = np.vstack([design_row(structure, j) for j in range(2 * K + 1)])
    return CellGeometry(half_width=K, decay=float(decay), weights=_frozen(weights), design=_frozen(design))


def window_weights(geometry: CellGeometry, ts: TimeSeries, t: int) -> np.ndarray:
    """Entry r + K is d_{t+r} * alpha_r; d is zero outside [0, T] and at missing points."""
    return window_weight_matrix(geometry, ts, [t])[0]


def window_weight_matrix(geometry: CellGeometry, ts: TimeSeries, centers: Sequence[int]) -> np.ndarray:
    """Stack of window_weights for several window centers, shape (len(centers), 2K + 1)."""
    times = np.asarray(centers, dtype=int)[:, None] + geometry.offsets[None, :]
    inside = (times >= 0) & (times <= ts.last_index)
    d = np.zeros(times.shape)
    d[inside] = ts.indicators[times[inside]]
    return d * geometry.weights[None, :]


def window_value_matrix(geometry: CellGeometry, ts: TimeSeries, centers: Sequence[int]) -> np.ndarray:
    """Observations y_{t+r} per window, with zeros wherever d_{t+r} = 0."""
    times = np.asarray(centers, dtype=int)[:, None] + geometry.offsets[None, :]
    inside = (times >= 0) & (times <= ts.last_index)
    values = np.zeros(times.shape)
    values[inside] = ts.filled(0.0)[times[inside]]
    return values

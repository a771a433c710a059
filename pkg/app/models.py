from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from escells.fitting import FitSettings
from escells.forecast import ForecastSettings
from escells.solver import SolverConfig

from . import __version__

__all__ = [
    "BenchmarkSettings",
    "DetectSettings",
    "FitSettings",
    "ForecastSettings",
    "NoiseSchedule",
    "RunManifest",
    "SolverConfig",
    "SynthConfig",
]


class DetectSettings(BaseModel):
    fraction: float = Field(default=0.015, gt=0.0, lt=0.5, description="Total two-sided tail mass flagged")


class NoiseSchedule(BaseModel):
    """Observation noise scale over time."""

    kind: Literal["piecewise", "sinusoidal"] = Field(default="sinusoidal")
    segments: List[Tuple[int, float]] = Field(
        default_factory=list, description="(start, sigma) pairs for piecewise schedules"
    )
    base: float = Field(default=1.0, ge=0.0, description="Mean sigma of a sinusoidal schedule")
    amplitude: float = Field(default=0.0, ge=0.0, description="Swing of a sinusoidal schedule")
    period: float = Field(default=250.0, gt=0.0, description="Period of a sinusoidal schedule")

    @model_validator(mode="after")
    def check_schedule(self) -> "NoiseSchedule":
        if self.kind == "piecewise":
            if not self.segments:
                raise ValueError("piecewise noise needs at least one segment")
            if any(sigma < 0 for _, sigma in self.segments):
                raise ValueError("noise scales must be >= 0")
        elif self.amplitude > self.base:
            raise ValueError("sinusoidal amplitude may not exceed its base (sigma must stay >= 0)")
        return self


class SynthConfig(BaseModel):
    """Synthetic series: level/trend schedule, seasonality, heteroscedastic noise and outliers."""

    length: int = Field(default=1000, description="Number of observations")
    period: int = Field(default=12, ge=2, description="Seasonal period")
    base_level: float = Field(default=100.0)
    base_trend: float = Field(default=0.0)
    level_shifts: List[Tuple[int, float]] = Field(default_factory=list, description="(time, delta) jumps")
    trend_shifts: List[Tuple[int, float]] = Field(default_factory=list, description="(time, delta) slope changes")
    seasonal_amplitude: float = Field(default=0.0, ge=0.0)
    noise: NoiseSchedule = Field(default_factory=lambda: NoiseSchedule(kind="sinusoidal", base=0.0))
    outlier_fraction: float = Field(default=0.0, ge=0.0, le=0.2)
    outlier_scale: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0)

    @model_validator(mode="after")
    def check_length(self) -> "SynthConfig":
        if self.length < self.period + 2:
            raise ValueError(f"length must be at least period + 2 = {self.period + 2}")
        return self

    @classmethod
    def preset(cls, name: str) -> "SynthConfig":
        if name != "fig1":
            raise ValueError(f"unknown preset {name!r}")
        return cls(
            length=1000,
            period=12,
            base_level=100.0,
            base_trend=0.05,
            level_shifts=[(500, -15.0)],
            trend_shifts=[(600, -0.08)],
            seasonal_amplitude=8.0,
            noise=NoiseSchedule(kind="sinusoidal", base=1.5, amplitude=1.0, period=250.0),
            outlier_fraction=0.015,
            outlier_scale=40.0,
            seed=0,
        )


class BenchmarkSettings(BaseModel):
    methods: List[Literal["hw", "rhw", "escells"]] = Field(default=["hw", "rhw", "escells"])
    split: Optional[int] = Field(default=None, ge=1, description="First held-out index, defaults to length - horizon")
    horizon: int = Field(default=100, ge=1)
    window: int = Field(default=10, ge=1, description="Sliding MAPE window")
    hw_mode: Literal["fit", "hand"] = Field(default="fit")
    workers: int = Field(default=1, ge=1, description="Methods fitted concurrently")


class RunManifest(BaseModel):
    """Everything needed to reproduce an output file."""

    tool: str = Field(default="escells")
    version: str = Field(default=__version__)
    command: str
    fit: Optional[FitSettings] = None
    solver: Optional[SolverConfig] = None
    forecast: Optional[ForecastSettings] = None
    detect: Optional[DetectSettings] = None
    benchmark: Optional[BenchmarkSettings] = None
    synth: Optional[SynthConfig] = None
    input_path: Optional[str] = None
    input_sha256: Optional[str] = None
    extra: Dict[str, Any] = Field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return self.model_dump(mode="json", exclude_none=True)

"""CSV ingestion and JSON/CSV result files, all written atomically with an embedded manifest."""

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from escells.analytics import AnomalyReport, SlidingMape
from escells.errors import CsvFormatError, InvalidInputError
from escells.fitting import FitResult
from escells.forecast import ForecastResult
from escells.model import TimeSeries

MANIFEST_PREFIX = "# manifest: "
PathLike = Union[str, Path]


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def atomic_write_text(path: PathLike, text: str):
    """Write through a temporary file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile("w", dir=path.parent, prefix=f".{path.name}.", delete=False,
                                         encoding="utf-8", newline="")
    try:
        with handle:
            handle.write(text)
        os.replace(handle.name, path)
    except BaseException:
        if os.path.exists(handle.name):
            os.unlink(handle.name)
        raise


def _manifest_line(manifest: dict) -> str:
    return MANIFEST_PREFIX + json.dumps(manifest, sort_keys=True) + "\n"


def _write_csv(path: Path, frame: pd.DataFrame, manifest: dict):
    atomic_write_text(path, _manifest_line(manifest) + frame.to_csv(index=False, lineterminator="\n"))


def read_manifest(path: PathLike) -> Optional[dict]:
    """Manifest embedded in a CSV comment line or a JSON result file."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as handle:
            return json.load(handle).get("manifest")
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.startswith(MANIFEST_PREFIX):
                return json.loads(line[len(MANIFEST_PREFIX):])
            if not line.startswith("#"):
                break
    return None


def load_csv(
    path: PathLike,
    timestamp_column: str = "timestamp",
    value_column: str = "value",
) -> TimeSeries:
    """
    Read a uniformly spaced series.

    Lines starting with '#' are skipped. Empty or non-numeric values become missing.
    Duplicate or decreasing timestamps raise CsvFormatError with the file line numbers.
    """
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    content_lines = [
        number for number, line in enumerate(text.splitlines(), start=1)
        if line.strip() and not line.lstrip().startswith("#")
    ]
    if not content_lines:
        raise CsvFormatError(f"{path}: no header found")

    body = "\n".join(line for line in text.splitlines() if not line.lstrip().startswith("#"))
    try:
        frame = pd.read_csv(io.StringIO(body), dtype=str, keep_default_na=False, skip_blank_lines=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise CsvFormatError(f"{path}: {exc}", [content_lines[0]]) from exc

    frame.columns = [str(c).strip() for c in frame.columns]
    missing = [c for c in (timestamp_column, value_column) if c not in frame.columns]
    if missing:
        raise CsvFormatError(
            f"{path}: header must contain {timestamp_column!r} and {value_column!r}, got {list(frame.columns)}",
            [content_lines[0]],
        )
    line_numbers = np.asarray(content_lines[1:1 + len(frame)])

    raw_times = frame[timestamp_column].str.strip()
    times = pd.to_numeric(raw_times, errors="coerce")
    if times.isna().any():
        times = pd.to_datetime(raw_times, errors="coerce")
        if times.isna().any():
            bad = line_numbers[times.isna().to_numpy()].tolist()
            raise CsvFormatError(f"{path}: unparseable timestamps", bad)
        order = times.astype("int64").to_numpy()
    else:
        order = times.to_numpy(dtype=float)
    if order.size > 1:
        broken = np.flatnonzero(np.diff(order) <= 0) + 1
        if broken.size:
            raise CsvFormatError(
                f"{path}: timestamps must strictly increase", line_numbers[broken].tolist()
            )

    values = pd.to_numeric(frame[value_column].str.strip(), errors="coerce").to_numpy(dtype=float)
    return TimeSeries(values=values, mask=~np.isnan(values))


def write_series_csv(path: PathLike, ts: TimeSeries, manifest: dict):
    """timestamp,value with integer timestamps; missing values are left empty."""
    frame = pd.DataFrame({
        "timestamp": np.arange(ts.length),
        "value": [repr(float(v)) if m else "" for v, m in zip(ts.values, ts.mask)],
    })
    _write_csv(Path(path), frame, manifest)


def _stem(path: PathLike) -> Tuple[Path, Path]:
    path = Path(path)
    json_path = path if path.suffix == ".json" else path.with_name(path.name + ".json")
    return json_path, json_path.with_suffix("")


def save_results(
    path: PathLike,
    manifest: dict,
    fit: Optional[FitResult] = None,
    forecast: Optional[ForecastResult] = None,
    anomalies: Optional[AnomalyReport] = None,
    imputed: Optional[TimeSeries] = None,
    series: Optional[TimeSeries] = None,
    mape: Optional[Dict[str, SlidingMape]] = None,
    summary: Optional[dict] = None,
) -> List[Path]:
    """
    Write ``<stem>.json`` and companion CSVs next to it.

    Returns the written paths, JSON first.
    """
    json_path, stem = _stem(path)
    written: List[Path] = []
    document: dict = {"manifest": manifest}

    def companion(suffix: str, frame: pd.DataFrame):
        target = stem.with_name(f"{stem.name}_{suffix}.csv")
        _write_csv(target, frame, manifest)
        written.append(target)

    if fit is not None:
        document["fit"] = fit.to_dict()
        # run time differs between identical runs, so it lives beside the result file
        timing = {"manifest": manifest, "solver_wall_time": document["fit"]["solver"].pop("wall_time")}
        timing_path = stem.with_name(f"{stem.name}_timing.json")
        atomic_write_text(timing_path, json.dumps(timing, indent=2, sort_keys=True) + "\n")
        decomposition = fit.decomposition
        companion("decomposition", pd.DataFrame({
            "t": np.arange(fit.ts.length),
            "level": decomposition.level,
            "trend": decomposition.trend,
            "seasonal": decomposition.seasonal,
            "fitted": fit.fitted,
            "observed": fit.ts.values,
        }))
        companion("residuals", pd.DataFrame({"t": fit.residual_times, "residual": fit.residuals}))
        series = series if series is not None else fit.ts

    if series is not None:
        target = stem.with_name(f"{stem.name}_series.csv")
        write_series_csv(target, series, manifest)
        written.append(target)

    if forecast is not None:
        document["forecast"] = forecast.to_dict()
        companion("bands", pd.DataFrame({
            "horizon": np.arange(1, forecast.horizon + 1),
            "mean": forecast.mean["y"],
            "inner_lo": forecast.inner["y"].lower,
            "inner_hi": forecast.inner["y"].upper,
            "outer_lo": forecast.outer["y"].lower,
            "outer_hi": forecast.outer["y"].upper,
        }))

    if anomalies is not None:
        document["anomalies"] = anomalies.to_dict()
        times = anomalies.times if anomalies.times is not None else anomalies.indices
        flagged = np.array([], dtype=float)
        if fit is not None and fit.residuals.size:
            flagged = fit.residuals[anomalies.indices]
        companion("anomalies", pd.DataFrame({
            "t": times,
            "residual": flagged if flagged.size == len(times) else np.full(len(times), np.nan),
        }))

    if imputed is not None:
        document["imputed"] = {"values": imputed.values.tolist()}

    if mape is not None:
        document["mape"] = {
            name: {"positions": m.positions.tolist(), "values": m.values.tolist(), "skipped": m.skipped}
            for name, m in mape.items()
        }
        frame = pd.DataFrame({"position": sorted({int(p) for m in mape.values() for p in m.positions})})
        for name, m in mape.items():
            frame[name] = frame["position"].map(dict(zip(m.positions.tolist(), m.values.tolist())))
        companion("mape", frame)

    if summary is not None:
        document["summary"] = summary

    if fit is not None:
        written.append(timing_path)

    atomic_write_text(json_path, json.dumps(document, indent=2, sort_keys=True) + "\n")
    return [json_path] + written


def read_results(path: PathLike) -> dict:
    json_path, _ = _stem(path)
    with open(json_path, encoding="utf-8") as handle:
        return json.load(handle)


def load_fit(path: PathLike) -> Tuple[FitResult, dict]:
    """FitResult and manifest from a fit JSON file, with the solver run time from its sidecar if present."""
    document = read_results(path)
    if "fit" not in document:
        raise InvalidInputError(f"{path} does not contain a fit")
    fit = FitResult.from_dict(document["fit"])
    _, stem = _stem(path)
    timing_path = stem.with_name(f"{stem.name}_timing.json")
    if timing_path.exists():
        with open(timing_path, encoding="utf-8") as handle:
            fit.stats.wall_time = float(json.load(handle).get("solver_wall_time", 0.0))
    return fit, document.get("manifest", {})

"""
Command-line surface: fit, forecast, detect, impute, synth and bench.

Exit codes: 0 success, 1 invalid input, 2 solver did not converge (results still written).
"""

import argparse
import logging
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from escells.analytics import detect_anomalies
from escells.errors import EscellsError
from escells.fitting import FitSettings, fit_escells
from escells.forecast import ForecastSettings
from escells.solver import SolverConfig

from ..models import BenchmarkSettings, DetectSettings, RunManifest, SynthConfig
from ..services.benchmark import run_benchmark
from ..services.storage import file_sha256, load_csv, load_fit, save_results
from ..services.synth import synth_generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def _default_output(source: str, suffix: str) -> str:
    path = Path(source)
    return str(path.with_name(f"{path.stem}_{suffix}.json"))


def _add_fit_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--period", type=int, required=True, help="Seasonal period p")
    parser.add_argument("--window", type=int, default=None, help="Half-width K (default: p)")
    parser.add_argument("--decay", type=float, default=None, help="Window weight decay (default 0.9)")
    parser.add_argument("--lambda1", type=float, default=None, help="Seasonal total-variation weight")
    parser.add_argument("--lambda2", type=float, default=None, help="Dynamics coupling weight")
    parser.add_argument("--max-iterations", type=int, default=None, help="Solver iteration cap")
    parser.add_argument("--tolerance", type=float, default=None, help="Solver optimality tolerance")


def _add_input_arguments(parser: argparse.ArgumentParser, required: bool):
    parser.add_argument("--input", required=required, help="CSV file with a timestamp and a value column")
    parser.add_argument("--timestamp-column", default="timestamp", help="Name of the timestamp column")
    parser.add_argument("--value-column", default="value", help="Name of the value column")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="escells", description="ES-Cells time-series analysis")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="Fit ES-Cells to a CSV series")
    _add_input_arguments(fit, required=True)
    _add_fit_arguments(fit)
    fit.add_argument("--output", help="Result JSON (default: <input>_fit.json)")

    forecast = sub.add_parser("forecast", help="Simulate forecast bands from a fit")
    forecast.add_argument("--fit", required=True, help="Fit JSON")
    forecast.add_argument("--horizon", type=int, default=None)
    forecast.add_argument("--paths", type=int, default=None)
    forecast.add_argument("--level", type=float, default=None)
    forecast.add_argument("--seed", type=int, default=None)
    forecast.add_argument("--residual-source", choices=["horizon", "empirical", "gaussian"], default=None)
    forecast.add_argument("--workers", type=int, default=None)
    forecast.add_argument("--output")

    detect = sub.add_parser("detect", help="Flag the most extreme residuals of a fit")
    detect.add_argument("--fit", required=True)
    detect.add_argument("--fraction", type=float, default=None)
    detect.add_argument("--output")

    impute = sub.add_parser("impute", help="Fill missing values from a fit")
    impute.add_argument("--fit", required=True)
    impute.add_argument("--output")

    synth = sub.add_parser("synth", help="Generate a synthetic series")
    source = synth.add_mutually_exclusive_group(required=True)
    source.add_argument("--preset", choices=["fig1"])
    source.add_argument("--config", help="SynthConfig JSON")
    synth.add_argument("--output", required=True)

    bench = sub.add_parser("bench", help="Compare HW, RHW and ES-Cells forecasts by sliding MAPE")
    _add_input_arguments(bench, required=False)
    bench.add_argument("--preset", choices=["fig1"], help="Benchmark on a synthetic preset instead")
    bench.add_argument("--config", help="SynthConfig JSON to benchmark on")
    bench.add_argument("--period", type=int, default=None, help="Seasonal period (default: synthetic period)")
    bench.add_argument("--methods", default="hw,rhw,escells")
    bench.add_argument("--split", type=int, default=None)
    bench.add_argument("--horizon", type=int, default=None)
    bench.add_argument("--window", type=int, default=None, help="Sliding MAPE window")
    bench.add_argument("--hw-mode", choices=["fit", "hand"], default=None)
    bench.add_argument("--workers", type=int, default=None)
    bench.add_argument("--output", required=True)
    return parser


def _fit_settings(args) -> FitSettings:
    return FitSettings.from_env(
        args.period, half_width=args.window, decay=args.decay, lambda1=args.lambda1, lambda2=args.lambda2
    )


def _solver_config(args) -> SolverConfig:
    return SolverConfig.from_env(max_iterations=args.max_iterations, tolerance=args.tolerance)


def cmd_fit(args) -> int:
    ts = load_csv(args.input, args.timestamp_column, args.value_column)
    settings = _fit_settings(args)
    config = _solver_config(args)
    print(f"✓ Loaded {ts.length} points ({ts.observed_count} observed) from {args.input}")

    result = fit_escells(ts, settings, config)
    manifest = RunManifest(
        command="fit",
        fit=settings,
        solver=config,
        input_path=str(args.input),
        input_sha256=file_sha256(args.input),
        extra={"timestamp_column": args.timestamp_column, "value_column": args.value_column},
    )
    output = args.output or _default_output(args.input, "fit")
    written = save_results(output, manifest.to_json_dict(), fit=result)
    print(f"✓ Fit written to {written[0]} ({len(written) - 1} companion CSVs)")
    if not result.stats.converged:
        print(f"⚠ Solver stopped after {result.stats.iterations} iterations "
              f"(residual {result.stats.residual:.3g} > {config.tolerance:.3g})")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _source_manifest(args, fit_manifest: dict, command: str, **sections) -> dict:
    manifest = RunManifest(
        command=command,
        input_path=str(args.fit),
        input_sha256=file_sha256(Path(args.fit)),
        extra={"fit_manifest": fit_manifest},
        **sections,
    )
    return manifest.to_json_dict()


def cmd_forecast(args) -> int:
    fit, fit_manifest = load_fit(args.fit)
    settings = ForecastSettings.from_env(
        horizon=args.horizon, n_paths=args.paths, level=args.level, seed=args.seed,
        residual_source=args.residual_source, workers=args.workers,
    )
    result = fit.forecast(settings)
    output = args.output or _default_output(args.fit, "forecast")
    written = save_results(output, _source_manifest(args, fit_manifest, "forecast", forecast=settings),
                           forecast=result)
    print(f"✓ Forecast of {settings.horizon} steps ({settings.n_paths} paths) written to {written[0]}")
    return EXIT_OK


def cmd_detect(args) -> int:
    fit, fit_manifest = load_fit(args.fit)
    settings = DetectSettings(**({"fraction": args.fraction} if args.fraction is not None else {}))
    report = detect_anomalies(fit.residuals, settings.fraction, fit.residual_times)
    output = args.output or _default_output(args.fit, "anomalies")
    written = save_results(output, _source_manifest(args, fit_manifest, "detect", detect=settings),
                           fit=fit, anomalies=report)
    print(f"✓ Flagged {len(report.indices)} of {fit.residuals.size} observations, written to {written[0]}")
    return EXIT_OK


def cmd_impute(args) -> int:
    fit, fit_manifest = load_fit(args.fit)
    completed = fit.imputed()
    output = args.output or _default_output(args.fit, "imputed")
    written = save_results(output, _source_manifest(args, fit_manifest, "impute"), imputed=completed,
                           series=completed)
    print(f"✓ Filled {fit.ts.length - fit.ts.observed_count} missing values, written to {written[0]}")
    return EXIT_OK


def _synth_config(args) -> SynthConfig:
    if args.preset:
        return SynthConfig.preset(args.preset)
    with open(args.config, encoding="utf-8") as handle:
        return SynthConfig.model_validate_json(handle.read())


def cmd_synth(args) -> int:
    config = _synth_config(args)
    result = synth_generate(config)
    manifest = RunManifest(command="synth", synth=config).to_json_dict()
    manifest["extra"] = {"outliers": result.outliers.tolist()}
    written = save_results(args.output, manifest, series=result.ts)
    print(f"✓ Generated {config.length} points with {result.outliers.size} outliers, written to {written[0]}")
    return EXIT_OK


def cmd_bench(args) -> int:
    synth = None
    if args.input:
        ts = load_csv(args.input, args.timestamp_column, args.value_column)
        if args.period is None:
            raise EscellsError("--period is required with --input")
        period = args.period
    elif args.preset or args.config:
        synth = _synth_config(args)
        ts = synth_generate(synth).ts
        period = args.period or synth.period
    else:
        raise EscellsError("bench needs --input, --preset or --config")

    overrides = {
        "methods": [m.strip() for m in args.methods.split(",") if m.strip()],
        "split": args.split,
        "horizon": args.horizon,
        "window": args.window,
        "hw_mode": args.hw_mode,
        "workers": args.workers,
    }
    settings = BenchmarkSettings(**{k: v for k, v in overrides.items() if v is not None})
    fit_settings = FitSettings.from_env(period)
    solver_config = SolverConfig.from_env()
    table = run_benchmark(ts, period, settings, fit_settings, solver_config)

    manifest = RunManifest(
        command="bench",
        fit=fit_settings,
        solver=solver_config,
        benchmark=settings,
        synth=synth,
        input_path=str(args.input) if args.input else None,
        input_sha256=file_sha256(args.input) if args.input else None,
    )
    written = save_results(args.output, manifest.to_json_dict(), mape=table.mape, summary=table.summary)
    print(f"✓ Benchmark written to {written[0]}")
    for key, value in sorted(table.summary.items()):
        print(f"  {key}: {value:.4g}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "detect": cmd_detect,
    "impute": cmd_impute,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and dispatch; input problems map to exit code 1."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return COMMANDS[args.command](args)
    except (EscellsError, ValidationError, ValueError, OSError) as exc:
        print(f"✗ {args.command} failed: {exc}")
        return EXIT_INPUT_ERROR

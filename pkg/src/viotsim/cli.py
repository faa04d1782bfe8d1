"""Command-line interface.

Subcommands:
  run       execute a scenario end to end and persist metrics, round history,
            anomaly reports, and a model checkpoint into the output directory
  evaluate  re-score a saved checkpoint against a scenario's held-out split
  gradcheck verify analytic gradients against central finite differences

Exit codes: 0 success, 1 validation error (bad file or arguments), 2 runtime
failure.  The default output directory comes from $VIOTSIM_OUT_DIR.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .harness import (
    EvaluationError,
    Metrics,
    Phase,
    PhaseError,
    analytic_phase,
    build_vehicle_data,
    confusion_counts,
    functional_phase,
    initial_phase,
    run_phases,
    write_event_metrics_csv,
    write_history_jsonl,
    write_metrics_csv,
    write_reports_jsonl,
)
from .model import (
    TrainingDivergenceError,
    gradient_check,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .pipeline import Batch
from .scenario import (
    ModelDims,
    ScenarioFormatError,
    ScenarioValidationError,
    flag_columns,
    load_scenario,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

GRADCHECK_TOLERANCE = 1e-4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viotsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario end to end")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--seed", type=int, default=None, help="override master_seed")
    run.add_argument("--rounds", type=int, default=None, help="override round count")
    run.add_argument("--out", default=None,
                     help="output directory (default: $VIOTSIM_OUT_DIR or ./viotsim-out)")

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a scenario")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--scenario", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--seed", type=int, default=7)
    return parser


def _print_metrics(label: str, metrics: Metrics) -> None:
    print(f"{label}: accuracy={metrics.accuracy:.4f} precision={metrics.precision:.4f} "
          f"recall={metrics.recall:.4f} f1={metrics.f1:.4f}")


def _cmd_run(args) -> int:
    config = load_scenario(args.scenario)
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
    if args.rounds is not None:
        config = dataclasses.replace(
            config, training=dataclasses.replace(config.training, rounds=args.rounds))
    out_dir = Path(args.out or os.environ.get("VIOTSIM_OUT_DIR", "viotsim-out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    report = run_phases(config, on_phase=lambda p: print(f"[phase] {p.value}"))

    write_metrics_csv(report, out_dir / "metrics.csv")
    write_event_metrics_csv(report, out_dir / "event_metrics.csv")
    write_history_jsonl(report, out_dir / "history.jsonl")
    write_reports_jsonl(report, out_dir / "reports.jsonl")
    save_checkpoint(out_dir / "checkpoint.bin", report.final_model,
                    report.norm_stats, report.threshold, report.columns)

    _print_metrics("global", report.global_metrics)
    print(f"anomaly reports: {len(report.anomaly_reports)}")
    print(f"outputs written to {out_dir}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    config = load_scenario(args.scenario)
    analytic = analytic_phase(functional_phase(initial_phase(config)))
    flags = flag_columns(config.regions)
    pooled_pred = []
    pooled_truth = []
    for vid, twin in sorted(analytic.twins.items()):
        stats = bundle.norm_stats.get(vid)
        if stats is None:
            raise EvaluationError(f"checkpoint has no normalization stats for {vid!r}")
        data = build_vehicle_data(twin, config.training.window,
                                  config.evaluation.test_fraction, flags, stats=stats)
        if len(data.test_set) == 0:
            raise EvaluationError(f"vehicle {vid!r} has no test windows")
        probs = predict(bundle.params, data.test_set.x)
        pred = (probs >= bundle.threshold).astype(np.int64)
        pooled_pred.append(pred)
        pooled_truth.append(data.test_set.y)
        _print_metrics(f"vehicle {vid}",
                       Metrics.from_counts(*confusion_counts(pred, data.test_set.y)))
    _print_metrics("global", Metrics.from_counts(*confusion_counts(
        np.concatenate(pooled_pred), np.concatenate(pooled_truth))))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    dims = ModelDims(input_size=6, hidden_size=8)
    rng = np.random.default_rng(args.seed)
    params = init_params(dims, args.seed)
    batch = Batch(x=rng.uniform(0.0, 1.0, (5, 4, dims.input_size)),
                  y=rng.integers(0, 2, 5).astype(np.int64))
    result = gradient_check(params, batch)
    for name in sorted(result.group_errors):
        print(f"{name}: max relative error {result.group_errors[name]:.3e}")
    print(f"max relative error: {result.max_rel_error:.3e} "
          f"(tolerance {GRADCHECK_TOLERANCE:.0e})")
    if result.passed(GRADCHECK_TOLERANCE):
        print("gradient check passed")
        return EXIT_OK
    print("gradient check FAILED")
    return EXIT_VALIDATION


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        return _cmd_gradcheck(args)
    except (ScenarioFormatError, ScenarioValidationError, EvaluationError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PhaseError, TrainingDivergenceError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

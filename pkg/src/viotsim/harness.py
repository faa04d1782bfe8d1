"""Six-phase run orchestration, evaluation, and stakeholder reporting.

The lifecycle is a chain of phase functions, each of which only accepts the
previous phase's result object: Initial (topology and generators), Functional
(vehicle telemetry, then cloudlet context), Analytic (twins created and
synced), IdentifyingAnomaly (datasets and local training), Collaborative
(hierarchical rounds), ReportingAndDecision (held-out evaluation and anomaly
reports).  Skipping a phase is impossible by construction: there is no other
way to obtain the input object the next phase requires.

Evaluation is window-level on the temporally last fraction of each stream,
with an event-level summary (per injected episode) as a secondary table.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .federation import FederationResult, RoundRecord, client_round_seed, run_hfl
from .model import (
    ModelParameters,
    classify_at,
    init_params,
    predict,
    train_local,
)
from .pipeline import (
    NormStats,
    NumericMatrix,
    SequenceSet,
    make_sequences,
    normalize,
    sequence_end_times,
)
from .scenario import (
    FederationTopology,
    ScenarioConfig,
    build_topology,
    derive_stream_seed,
    flag_columns,
    scenario_digest,
)
from .telemetry import (
    AnomalyKind,
    ContextStream,
    TelemetryStream,
    generate_context,
    generate_stream,
    inject_anomaly,
    plan_anomaly_windows,
)
from .twin import TwinState, snapshot_dataset, sync_twin


class Phase(enum.Enum):
    INITIAL = "Initial"
    FUNCTIONAL = "Functional"
    ANALYTIC = "Analytic"
    IDENTIFYING_ANOMALY = "IdentifyingAnomaly"
    COLLABORATIVE = "Collaborative"
    REPORTING_AND_DECISION = "ReportingAndDecision"


PHASE_ORDER = tuple(Phase)

STAKEHOLDERS = ("user", "vendor", "device")

# Probability bands -> recommended action, highest band first.
_ACTION_BANDS = (
    (0.9, "vendor-investigation"),
    (0.75, "driver-alert"),
    (0.0, "monitor"),
)


class EvaluationError(ValueError):
    """Evaluation asked for something the data cannot support."""


class PhaseError(RuntimeError):
    """A phase failed; the message names it."""


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    """Confusion counts and the derived rates, with explicit 0/0 rules."""

    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "Metrics":
        total = tp + fp + fn + tn
        accuracy = (tp + tn) / total if total else 0.0
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, accuracy=accuracy,
                   precision=precision, recall=recall, f1=f1)


def confusion_counts(predicted: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    tp = int(np.count_nonzero(predicted & truth))
    fp = int(np.count_nonzero(predicted & ~truth))
    fn = int(np.count_nonzero(~predicted & truth))
    tn = int(np.count_nonzero(~predicted & ~truth))
    return tp, fp, fn, tn


def evaluate(model: ModelParameters, test: SequenceSet, threshold: float) -> Metrics:
    """Window-level confusion metrics of the model on a held-out sequence set."""
    if len(test) == 0:
        raise EvaluationError("test sequence set is empty")
    predicted = classify_at(model, test.x, threshold)
    return Metrics.from_counts(*confusion_counts(predicted, test.y))


@dataclass(frozen=True)
class EventMetrics:
    """Per-episode view: an episode counts as detected if any of its windows fires."""

    episodes: int
    detected: int
    false_alarm_events: int
    precision: float
    recall: float
    f1: float


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end) index runs where mask is true."""
    runs = []
    start = None
    for i, value in enumerate(mask):
        if value and start is None:
            start = i
        elif not value and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def event_metrics(predicted: np.ndarray, truth: np.ndarray) -> EventMetrics:
    predicted = np.asarray(predicted).astype(bool)
    truth = np.asarray(truth).astype(bool)
    episodes = _runs(truth)
    detected = sum(1 for s, e in episodes if predicted[s:e].any())
    false_alarms = sum(1 for s, e in _runs(predicted) if not truth[s:e].any())
    precision = detected / (detected + false_alarms) if (detected + false_alarms) else 0.0
    recall = detected / len(episodes) if episodes else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return EventMetrics(episodes=len(episodes), detected=detected,
                        false_alarm_events=false_alarms, precision=precision,
                        recall=recall, f1=f1)


def random_baseline_f1(truth: np.ndarray) -> float:
    """Expected F1 of a predictor that fires at the label frequency.

    With prevalence p and positive rate q, expected precision is p and recall
    is q, so expected F1 is 2pq/(p+q); at q == p that is just p.
    """
    truth = np.asarray(truth).astype(bool)
    if truth.size == 0:
        return 0.0
    return float(np.count_nonzero(truth)) / truth.size


# ---------------------------------------------------------------------------
# Anomaly reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnomalyReport:
    """One maximal contiguous detected window for one vehicle."""

    vehicle_id: str
    window: tuple[int, int]            # [start, end) in stream time steps
    probability: float                 # peak probability inside the window
    stakeholders: tuple[str, ...]
    action: str


def action_for(probability: float) -> str:
    for bound, action in _ACTION_BANDS:
        if probability >= bound:
            return action
    return _ACTION_BANDS[-1][1]


def emit_reports(probabilities: np.ndarray, window_times: np.ndarray,
                 vehicle_ids: Sequence[str], threshold: float) -> list[AnomalyReport]:
    """Merge contiguous detections (per vehicle) into stakeholder reports.

    The three arrays are aligned per evaluated window; ``window_times`` is the
    absolute time of each window's last step.  Detections at consecutive times
    merge into a single report carrying all three stakeholder classes.
    """
    probabilities = np.asarray(probabilities)
    window_times = np.asarray(window_times)
    if not (len(probabilities) == len(window_times) == len(vehicle_ids)):
        raise ValueError("probabilities, window_times, vehicle_ids must align")
    by_vehicle: dict[str, list[tuple[int, float]]] = {}
    for prob, t, vid in zip(probabilities, window_times, vehicle_ids):
        if prob >= threshold:
            by_vehicle.setdefault(vid, []).append((int(t), float(prob)))
    reports = []
    for vid in sorted(by_vehicle):
        hits = sorted(by_vehicle[vid])
        start_t, peak = hits[0][0], hits[0][1]
        prev_t = start_t
        for t, prob in hits[1:]:
            if t == prev_t + 1:
                peak = max(peak, prob)
                prev_t = t
                continue
            reports.append(AnomalyReport(vehicle_id=vid, window=(start_t, prev_t + 1),
                                         probability=peak, stakeholders=STAKEHOLDERS,
                                         action=action_for(peak)))
            start_t, peak, prev_t = t, prob, t
        reports.append(AnomalyReport(vehicle_id=vid, window=(start_t, prev_t + 1),
                                     probability=peak, stakeholders=STAKEHOLDERS,
                                     action=action_for(peak)))
    return reports


# ---------------------------------------------------------------------------
# Phase chain
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialPhaseResult:
    config: ScenarioConfig
    topology: FederationTopology
    digest: str


@dataclass(frozen=True)
class FunctionalPhaseResult:
    initial: InitialPhaseResult
    telemetry: dict[str, TelemetryStream]
    context: dict[str, ContextStream]


@dataclass(frozen=True)
class AnalyticPhaseResult:
    functional: FunctionalPhaseResult
    twins: dict[str, TwinState]


@dataclass(frozen=True)
class VehicleData:
    """Per-vehicle train/test material derived from a twin snapshot."""

    vehicle_id: str
    region_id: str
    columns: tuple[str, ...]
    train_set: SequenceSet
    test_set: SequenceSet
    test_times: np.ndarray
    norm_stats: NormStats
    split_row: int


@dataclass(frozen=True)
class IdentifyingAnomalyResult:
    analytic: AnalyticPhaseResult
    vehicle_data: dict[str, VehicleData]
    initial_model: ModelParameters
    initial_local_losses: dict[str, float]


@dataclass(frozen=True)
class CollaborativeResult:
    identifying: IdentifyingAnomalyResult
    federation: FederationResult


def _expect(value, expected_type, phase: Phase):
    if not isinstance(value, expected_type):
        raise TypeError(
            f"{phase.value} phase requires a {expected_type.__name__}; "
            f"got {type(value).__name__} (phases cannot be run out of order)")
    return value


def initial_phase(config: ScenarioConfig) -> InitialPhaseResult:
    """Instantiate the topology; generator seeds all derive from the master seed."""
    _expect(config, ScenarioConfig, Phase.INITIAL)
    return InitialPhaseResult(config=config, topology=build_topology(config),
                              digest=scenario_digest(config))


def functional_phase(initial: InitialPhaseResult) -> FunctionalPhaseResult:
    """Produce vehicle telemetry (sub-phase one), then cloudlet context data."""
    _expect(initial, InitialPhaseResult, Phase.FUNCTIONAL)
    config = initial.config
    spec = config.telemetry
    plan = spec.anomalies
    telemetry: dict[str, TelemetryStream] = {}
    for region in initial.topology.regions:
        for vid in region.vehicle_ids:
            stream = generate_stream(
                vid, spec.steps_per_vehicle,
                derive_stream_seed(config.master_seed, f"telemetry:{vid}"),
                spec.features)
            windows = [(w.kind, w.start, w.end)
                       for w in plan.windows if w.vehicle_id == vid]
            windows += plan_anomaly_windows(
                spec.steps_per_vehicle, plan.fraction, plan.kinds,
                plan.min_len, plan.max_len,
                derive_stream_seed(config.master_seed, f"anomaly-plan:{vid}"))
            for i, (kind, start, end) in enumerate(sorted(windows, key=lambda w: w[1])):
                stream = inject_anomaly(
                    stream, kind, (start, end),
                    derive_stream_seed(config.master_seed, f"anomaly:{vid}:{i}"),
                    sigma_multiplier=plan.sigma_multiplier)
            telemetry[vid] = stream
    context: dict[str, ContextStream] = {}
    context_by_region = {r.region_id: r.context for r in config.regions}
    for region in initial.topology.regions:
        context[region.region_id] = generate_context(
            region.region_id, spec.steps_per_vehicle,
            derive_stream_seed(config.master_seed, f"context:{region.region_id}"),
            context_by_region[region.region_id])
    return FunctionalPhaseResult(initial=initial, telemetry=telemetry, context=context)


def analytic_phase(functional: FunctionalPhaseResult) -> AnalyticPhaseResult:
    """Create one twin per vehicle and sync it over the full streams."""
    _expect(functional, FunctionalPhaseResult, Phase.ANALYTIC)
    steps = functional.initial.config.telemetry.steps_per_vehicle
    twins: dict[str, TwinState] = {}
    for region in functional.initial.topology.regions:
        for vid in region.vehicle_ids:
            twin = TwinState.initial(vid, region.region_id)
            twins[vid] = sync_twin(twin, functional.telemetry[vid],
                                   functional.context[region.region_id],
                                   now=max(steps - 1, 0))
    return AnalyticPhaseResult(functional=functional, twins=twins)


def build_vehicle_data(twin: TwinState, window: int, test_fraction: float,
                       flag_cols: Sequence[str],
                       stats: NormStats | None = None) -> VehicleData:
    """Snapshot the twin, split temporally, normalize, and build sequences.

    Normalization stats are fitted on the training rows only (or supplied from
    a checkpoint) and reused verbatim on the held-out rows.
    """
    dataset = snapshot_dataset(twin, (0, twin.synced_steps), flag_cols)
    split_row = int((1.0 - test_fraction) * len(dataset))
    train_values = dataset.values[:split_row]
    test_values = dataset.values[split_row:]
    if stats is None:
        _, stats = normalize(NumericMatrix(values=train_values, columns=dataset.columns))
    train_matrix = NumericMatrix(values=stats.apply(train_values), columns=dataset.columns)
    test_matrix = NumericMatrix(values=stats.apply(test_values), columns=dataset.columns)
    train_set = make_sequences(train_matrix, dataset.labels[:split_row], window)
    test_set = make_sequences(test_matrix, dataset.labels[split_row:], window)
    test_times = sequence_end_times(len(test_matrix.values), window, offset=split_row)
    return VehicleData(vehicle_id=twin.vehicle_id, region_id=twin.region_id,
                       columns=dataset.columns, train_set=train_set, test_set=test_set,
                       test_times=test_times, norm_stats=stats, split_row=split_row)


def identifying_anomaly_phase(analytic: AnalyticPhaseResult) -> IdentifyingAnomalyResult:
    """Build the training pipeline and run the first round's local training."""
    _expect(analytic, AnalyticPhaseResult, Phase.IDENTIFYING_ANOMALY)
    config = analytic.functional.initial.config
    flags = flag_columns(config.regions)
    vehicle_data = {
        vid: build_vehicle_data(twin, config.training.window,
                                config.evaluation.test_fraction, flags)
        for vid, twin in sorted(analytic.twins.items())
    }
    initial_model = init_params(
        config.training.dims, derive_stream_seed(config.master_seed, "model-init"))
    initial_losses: dict[str, float] = {}
    if config.training.rounds > 0:
        # The collaborative phase replays this round with identical seeds; the
        # losses recorded here are the round-0 local models' training losses.
        for vid, data in vehicle_data.items():
            if len(data.train_set) == 0:
                continue
            result = train_local(initial_model, data.train_set, config.training,
                                 client_round_seed(config.master_seed, 0, vid))
            initial_losses[vid] = result.stats.final_loss
    return IdentifyingAnomalyResult(analytic=analytic, vehicle_data=vehicle_data,
                                    initial_model=initial_model,
                                    initial_local_losses=initial_losses)


def collaborative_phase(identifying: IdentifyingAnomalyResult) -> CollaborativeResult:
    """Run the Q-round hierarchy over the per-vehicle sequence sets."""
    _expect(identifying, IdentifyingAnomalyResult, Phase.COLLABORATIVE)
    config = identifying.analytic.functional.initial.config
    train_sets = {vid: data.train_set
                  for vid, data in identifying.vehicle_data.items()}
    federation = run_hfl(identifying.analytic.functional.initial.topology,
                         train_sets, config.training, config.master_seed,
                         initial=identifying.initial_model)
    return CollaborativeResult(identifying=identifying, federation=federation)


@dataclass(frozen=True)
class SimulationReport:
    """Self-contained run summary; the seed and digest reproduce every number."""

    scenario_digest: str
    master_seed: int
    rounds: int
    threshold: float
    phase_trace: tuple[Phase, ...]
    round_history: tuple[RoundRecord, ...]
    global_metrics: Metrics
    region_metrics: dict[str, Metrics]
    vehicle_metrics: dict[str, Metrics]
    global_event_metrics: EventMetrics
    vehicle_event_metrics: dict[str, EventMetrics]
    anomaly_reports: tuple[AnomalyReport, ...]
    baseline_f1: float
    final_model: ModelParameters
    norm_stats: dict[str, NormStats]
    columns: tuple[str, ...]
    initial_local_losses: dict[str, float]
    wall_time_s: float


def reporting_phase(collaborative: CollaborativeResult,
                    wall_time_s: float = 0.0) -> SimulationReport:
    """Evaluate the trained model on the held-out split and emit reports."""
    _expect(collaborative, CollaborativeResult, Phase.REPORTING_AND_DECISION)
    identifying = collaborative.identifying
    config = identifying.analytic.functional.initial.config
    topology = identifying.analytic.functional.initial.topology
    model = collaborative.federation.final_model
    threshold = config.evaluation.threshold

    vehicle_metrics: dict[str, Metrics] = {}
    vehicle_events: dict[str, EventMetrics] = {}
    counts_by_region: dict[str, list[int]] = {}
    all_probs, all_times, all_vids = [], [], []
    all_pred, all_truth = [], []
    for vid, data in sorted(identifying.vehicle_data.items()):
        if len(data.test_set) == 0:
            raise EvaluationError(
                f"vehicle {vid!r} has no test windows; "
                "increase steps_per_vehicle or test_fraction")
        probs = predict(model, data.test_set.x)
        pred = (probs >= threshold).astype(np.int64)
        counts = confusion_counts(pred, data.test_set.y)
        vehicle_metrics[vid] = Metrics.from_counts(*counts)
        vehicle_events[vid] = event_metrics(pred, data.test_set.y)
        region_counts = counts_by_region.setdefault(data.region_id, [0, 0, 0, 0])
        for i in range(4):
            region_counts[i] += counts[i]
        all_probs.append(probs)
        all_times.append(data.test_times)
        all_vids.extend([vid] * len(probs))
        all_pred.append(pred)
        all_truth.append(data.test_set.y)

    pred_cat = np.concatenate(all_pred)
    truth_cat = np.concatenate(all_truth)
    global_metrics = Metrics.from_counts(*confusion_counts(pred_cat, truth_cat))
    region_metrics = {rid: Metrics.from_counts(*counts)
                      for rid, counts in sorted(counts_by_region.items())}
    reports = emit_reports(np.concatenate(all_probs), np.concatenate(all_times),
                           all_vids, threshold)

    return SimulationReport(
        scenario_digest=identifying.analytic.functional.initial.digest,
        master_seed=config.master_seed,
        rounds=config.training.rounds,
        threshold=threshold,
        phase_trace=PHASE_ORDER,
        round_history=collaborative.federation.records,
        global_metrics=global_metrics,
        region_metrics=region_metrics,
        vehicle_metrics=vehicle_metrics,
        global_event_metrics=event_metrics(pred_cat, truth_cat),
        vehicle_event_metrics=vehicle_events,
        anomaly_reports=tuple(reports),
        baseline_f1=random_baseline_f1(truth_cat),
        final_model=model,
        norm_stats={vid: data.norm_stats
                    for vid, data in identifying.vehicle_data.items()},
        columns=next(iter(identifying.vehicle_data.values())).columns,
        initial_local_losses=identifying.initial_local_losses,
        wall_time_s=wall_time_s,
    )


def run_phases(config: ScenarioConfig,
               on_phase: Callable[[Phase], None] | None = None) -> SimulationReport:
    """Execute the six phases strictly in order; failures name the phase."""
    started = time.perf_counter()
    stages: list[tuple[Phase, Callable]] = [
        (Phase.INITIAL, initial_phase),
        (Phase.FUNCTIONAL, functional_phase),
        (Phase.ANALYTIC, analytic_phase),
        (Phase.IDENTIFYING_ANOMALY, identifying_anomaly_phase),
        (Phase.COLLABORATIVE, collaborative_phase),
    ]
    state = config
    for phase, fn in stages:
        if on_phase is not None:
            on_phase(phase)
        try:
            state = fn(state)
        except Exception as exc:
            raise PhaseError(f"{phase.value} phase failed: {exc}") from exc
    if on_phase is not None:
        on_phase(Phase.REPORTING_AND_DECISION)
    try:
        return reporting_phase(state, wall_time_s=time.perf_counter() - started)
    except Exception as exc:
        raise PhaseError(
            f"{Phase.REPORTING_AND_DECISION.value} phase failed: {exc}") from exc


# ---------------------------------------------------------------------------
# Persisted outputs
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def write_metrics_csv(report: SimulationReport, path: str | Path) -> None:
    """Window-level metrics, one row per scope, 9 significant digits."""
    lines = ["scope,id,round,accuracy,precision,recall,f1"]

    def row(scope: str, ident: str, m: Metrics) -> str:
        return ",".join([scope, ident, str(report.rounds), _fmt(m.accuracy),
                         _fmt(m.precision), _fmt(m.recall), _fmt(m.f1)])

    lines.append(row("global", "-", report.global_metrics))
    for rid in sorted(report.region_metrics):
        lines.append(row("region", rid, report.region_metrics[rid]))
    for vid in sorted(report.vehicle_metrics):
        lines.append(row("vehicle", vid, report.vehicle_metrics[vid]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_event_metrics_csv(report: SimulationReport, path: str | Path) -> None:
    """Secondary table: per-episode detection quality."""
    lines = ["scope,id,episodes,detected,false_alarm_events,precision,recall,f1"]

    def row(scope: str, ident: str, m: EventMetrics) -> str:
        return ",".join([scope, ident, str(m.episodes), str(m.detected),
                         str(m.false_alarm_events), _fmt(m.precision),
                         _fmt(m.recall), _fmt(m.f1)])

    lines.append(row("global", "-", report.global_event_metrics))
    for vid in sorted(report.vehicle_event_metrics):
        lines.append(row("vehicle", vid, report.vehicle_event_metrics[vid]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_history_jsonl(report: SimulationReport, path: str | Path) -> None:
    """One structured record per (round, aggregation node)."""
    import json

    lines = [json.dumps(record.to_json_dict(), sort_keys=True)
             for record in report.round_history]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def write_reports_jsonl(report: SimulationReport, path: str | Path) -> None:
    """One anomaly report per line."""
    import json

    lines = []
    for r in report.anomaly_reports:
        lines.append(json.dumps({
            "vehicle": r.vehicle_id,
            "window": [r.window[0], r.window[1]],
            "probability": r.probability,
            "stakeholders": list(r.stakeholders),
            "action": r.action,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

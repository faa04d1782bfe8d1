"""Deterministic hierarchical federated learning simulator for vehicle fleets.

Synthetic vehicle telemetry flows through cloudlet-hosted digital twins into a
per-vehicle LSTM anomaly classifier; weight deltas are averaged at regional
cloudlets and again at a multi-cloud server over synchronous rounds.  One
master seed reproduces every byte of output.
"""

from .scenario import (
    FederationTopology,
    ModelDims,
    ScenarioConfig,
    TrainingConfig,
    build_topology,
    derive_stream_seed,
    load_scenario,
)
from .telemetry import AnomalyKind, generate_context, generate_stream, inject_anomaly
from .twin import TwinState, snapshot_dataset, staleness, sync_twin
from .pipeline import SequenceSet, make_sequences, normalize, split_batches
from .model import (
    ModelParameters,
    WeightDelta,
    classify_at,
    gradient_check,
    init_params,
    lstm_forward,
    predict,
    train_local,
)
from .federation import aggregate, cloudlet_round, global_round, run_hfl
from .harness import Metrics, Phase, SimulationReport, evaluate, run_phases

__version__ = "0.1.0"

__all__ = [
    "AnomalyKind",
    "FederationTopology",
    "Metrics",
    "ModelDims",
    "ModelParameters",
    "Phase",
    "ScenarioConfig",
    "SequenceSet",
    "SimulationReport",
    "TrainingConfig",
    "TwinState",
    "WeightDelta",
    "aggregate",
    "build_topology",
    "classify_at",
    "cloudlet_round",
    "derive_stream_seed",
    "evaluate",
    "generate_context",
    "generate_stream",
    "global_round",
    "gradient_check",
    "init_params",
    "inject_anomaly",
    "load_scenario",
    "lstm_forward",
    "make_sequences",
    "normalize",
    "predict",
    "run_hfl",
    "run_phases",
    "snapshot_dataset",
    "split_batches",
    "staleness",
    "sync_twin",
    "train_local",
]

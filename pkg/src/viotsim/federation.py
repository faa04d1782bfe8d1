"""Hierarchical synchronous federated rounds.

One round: the multi-cloud server broadcasts the shared model, every vehicle
trains locally on its twin snapshot, each regional cloudlet averages its
children's weight deltas, and the server averages the cloudlet deltas.  All
summation runs in canonical (sorted-by-id) order and each level's delta to its
parent is the exact scaled sum it applied, so the hierarchy composes
algebraically: with a unit server rate, two-level aggregation over one region
is bitwise identical to flat averaging over the same clients.

Clients with empty datasets are skipped and shrink the averaging denominator;
a level with no participants leaves its model unchanged for the round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .model import (
    EmptyTrainingData,
    LocalTrainResult,
    ModelParameters,
    TrainingDivergenceError,
    WeightDelta,
    init_params,
    train_local,
)
from .pipeline import SequenceSet
from .scenario import FederationTopology, TrainingConfig, derive_stream_seed

LEVEL_CLOUDLET = "cloudlet"
LEVEL_MULTI_CLOUD = "multi_cloud"
MULTI_CLOUD_ID = "multi-cloud"


class EmptyAggregationError(RuntimeError):
    """No deltas arrived at an aggregation point this round."""


@dataclass
class AggregationNode:
    """One aggregation point: a regional cloudlet or the multi-cloud server."""

    node_id: str
    level: str
    children: tuple[str, ...]
    model: ModelParameters

    def __post_init__(self):
        if not self.children:
            raise ValueError(f"aggregation node {self.node_id!r} has no children")
        self.children = tuple(sorted(self.children))


@dataclass(frozen=True)
class RoundRecord:
    """Audit record for one (round, node): who participated and what moved."""

    round_index: int
    level: str
    node_id: str
    participants: int
    skipped: tuple[str, ...]
    child_delta_norms: dict[str, float]
    aggregate_delta_norm: float
    client_losses: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "round": self.round_index,
            "level": self.level,
            "node": self.node_id,
            "participants": self.participants,
            "skipped": list(self.skipped),
            "child_delta_norms": {k: self.child_delta_norms[k]
                                  for k in sorted(self.child_delta_norms)},
            "aggregate_delta_norm": self.aggregate_delta_norm,
        }
        if self.client_losses:
            out["client_losses"] = {k: self.client_losses[k]
                                    for k in sorted(self.client_losses)}
        return out


def _scaled_sum(deltas: Sequence[WeightDelta], server_rate: float,
                n_effective: int) -> np.ndarray:
    """(rate / n) * sum of deltas, accumulated in the given (canonical) order."""
    if not deltas:
        raise EmptyAggregationError("no deltas to aggregate")
    if n_effective < 1:
        raise ValueError("n_effective must be >= 1")
    total = deltas[0].data.copy()
    for delta in deltas[1:]:
        total += delta.data
    return (server_rate / n_effective) * total


def aggregate(shared: ModelParameters, deltas: Sequence[WeightDelta],
              server_rate: float, n_effective: int) -> ModelParameters:
    """shared + (rate / n_effective) * sum(deltas), summed in canonical order."""
    applied = _scaled_sum(deltas, server_rate, n_effective)
    return ModelParameters(shared.dims, shared.data + applied)


def _aggregate_with_delta(shared: ModelParameters, deltas: Sequence[WeightDelta],
                          server_rate: float, n_effective: int,
                          ) -> tuple[ModelParameters, WeightDelta]:
    # The reported delta is the exact quantity added, not a recomputed
    # difference, so parent levels replay it without extra rounding.
    applied = _scaled_sum(deltas, server_rate, n_effective)
    return (ModelParameters(shared.dims, shared.data + applied),
            WeightDelta(shared.dims, applied))


@dataclass(frozen=True)
class CloudletRoundResult:
    model: ModelParameters
    delta: WeightDelta | None       # None when every child was skipped
    record: RoundRecord
    client_results: dict[str, LocalTrainResult]


def client_round_seed(master_seed: int, round_index: int, vehicle_id: str) -> int:
    return derive_stream_seed(master_seed, f"train:round={round_index}:{vehicle_id}")


def _train_children(shared: ModelParameters, child_ids: Sequence[str],
                    train_sets: Mapping[str, SequenceSet], cfg: TrainingConfig,
                    round_index: int, master_seed: int,
                    ) -> tuple[dict[str, LocalTrainResult], list[str]]:
    results: dict[str, LocalTrainResult] = {}
    skipped: list[str] = []
    for vid in sorted(child_ids):
        data = train_sets.get(vid)
        try:
            if data is None:
                raise EmptyTrainingData(f"no dataset for {vid!r}")
            results[vid] = train_local(
                shared, data, cfg, client_round_seed(master_seed, round_index, vid))
        except EmptyTrainingData:
            skipped.append(vid)
    return results, skipped


def cloudlet_round(node: AggregationNode, train_sets: Mapping[str, SequenceSet],
                   cfg: TrainingConfig, round_index: int, master_seed: int,
                   vendor_groups: Sequence[tuple[str, tuple[str, ...]]] | None = None,
                   ) -> CloudletRoundResult:
    """Train this cloudlet's vehicles and average their deltas.

    ``node.model`` must be the model received from the multi-cloud server for
    this round.  With ``vendor_groups`` set (the optional vendor tier), deltas
    are first averaged per vendor and the cloudlet averages vendor deltas.
    """
    results, skipped = _train_children(node.model, node.children, train_sets,
                                       cfg, round_index, master_seed)
    rate = cfg.server_learning_rate
    losses = {vid: res.stats.final_loss for vid, res in results.items()}
    norms = {vid: res.delta.norm() for vid, res in results.items()}
    if not results:
        record = RoundRecord(round_index=round_index, level=LEVEL_CLOUDLET,
                             node_id=node.node_id, participants=0,
                             skipped=tuple(skipped), child_delta_norms={},
                             aggregate_delta_norm=0.0)
        return CloudletRoundResult(model=node.model, delta=None, record=record,
                                   client_results={})

    if vendor_groups is None:
        deltas = [results[vid].delta for vid in sorted(results)]
        model, applied = _aggregate_with_delta(node.model, deltas, rate, len(deltas))
    else:
        vendor_deltas = []
        for vendor_id, vehicle_ids in sorted(vendor_groups):
            member_deltas = [results[vid].delta
                             for vid in sorted(vehicle_ids) if vid in results]
            if member_deltas:
                vendor_deltas.append(
                    WeightDelta(node.model.dims,
                                _scaled_sum(member_deltas, rate, len(member_deltas))))
        model, applied = _aggregate_with_delta(node.model, vendor_deltas, rate,
                                               len(vendor_deltas))

    record = RoundRecord(round_index=round_index, level=LEVEL_CLOUDLET,
                         node_id=node.node_id, participants=len(results),
                         skipped=tuple(skipped), child_delta_norms=norms,
                         aggregate_delta_norm=applied.norm(), client_losses=losses)
    return CloudletRoundResult(model=model, delta=applied, record=record,
                               client_results=results)


def global_round(server: AggregationNode,
                 cloudlet_deltas: Mapping[str, WeightDelta | None],
                 cfg: TrainingConfig, round_index: int,
                 ) -> tuple[ModelParameters, RoundRecord]:
    """Average the cloudlet deltas into the server model (synchronous barrier)."""
    arrived = {cid: d for cid, d in cloudlet_deltas.items() if d is not None}
    skipped = tuple(sorted(set(cloudlet_deltas) - set(arrived)))
    if not arrived:
        record = RoundRecord(round_index=round_index, level=LEVEL_MULTI_CLOUD,
                             node_id=server.node_id, participants=0, skipped=skipped,
                             child_delta_norms={}, aggregate_delta_norm=0.0)
        return server.model, record
    deltas = [arrived[cid] for cid in sorted(arrived)]
    model, applied = _aggregate_with_delta(server.model, deltas,
                                           cfg.server_learning_rate, len(deltas))
    record = RoundRecord(
        round_index=round_index, level=LEVEL_MULTI_CLOUD, node_id=server.node_id,
        participants=len(deltas), skipped=skipped,
        child_delta_norms={cid: arrived[cid].norm() for cid in sorted(arrived)},
        aggregate_delta_norm=applied.norm())
    return model, record


@dataclass(frozen=True)
class FederationResult:
    final_model: ModelParameters
    records: tuple[RoundRecord, ...]


def run_hfl(topology: FederationTopology, train_sets: Mapping[str, SequenceSet],
            cfg: TrainingConfig, master_seed: int,
            initial: ModelParameters | None = None) -> FederationResult:
    """Run the full Q-round hierarchy: broadcast, train, cloudlet, multi-cloud.

    With zero rounds the initial model is returned untouched.  Non-finite
    parameters abort with the failing round index.
    """
    model = initial if initial is not None else init_params(
        cfg.dims, derive_stream_seed(master_seed, "model-init"))
    records: list[RoundRecord] = []
    for round_index in range(cfg.rounds):
        cloudlet_deltas: dict[str, WeightDelta | None] = {}
        try:
            for region in topology.regions:
                node = AggregationNode(node_id=region.cloudlet_id, level=LEVEL_CLOUDLET,
                                       children=region.vehicle_ids, model=model)
                vendor_groups = None
                if cfg.vendor_tier:
                    vendor_groups = [(v.vendor_id, v.vehicle_ids) for v in region.vendors]
                result = cloudlet_round(node, train_sets, cfg, round_index, master_seed,
                                        vendor_groups=vendor_groups)
                cloudlet_deltas[region.cloudlet_id] = result.delta
                records.append(result.record)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"round {round_index}: {exc}") from exc
        server = AggregationNode(node_id=MULTI_CLOUD_ID, level=LEVEL_MULTI_CLOUD,
                                 children=tuple(cloudlet_deltas), model=model)
        model, record = global_round(server, cloudlet_deltas, cfg, round_index)
        records.append(record)
        if not model.is_finite():
            raise TrainingDivergenceError(
                f"model diverged (non-finite parameters) at round {round_index}")
    return FederationResult(final_model=model, records=tuple(records))

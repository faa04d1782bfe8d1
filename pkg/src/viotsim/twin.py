"""Cloudlet-hosted digital twins and training datasets drawn from them.

A twin mirrors one vehicle's telemetry fused with its region's context, up to
the last synchronization time.  Training and evaluation read exclusively from
twin snapshots, never from the raw vehicle streams, which pins the dataflow
to the cloudlet: physical streams -> mirrored twin state -> numeric dataset.

Twins only move forward in time.  Requesting data past the synced prefix is a
staleness error, not silent truncation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenario import LIGHT_STATES, WEATHER_COLUMNS
from .telemetry import ContextStream, TelemetryStream, NORMAL_LABEL


class TwinMonotonicityError(ValueError):
    """A twin was asked to synchronize backward in time."""


class TwinStalenessError(ValueError):
    """Requested data the twin has not yet mirrored."""


@dataclass(frozen=True)
class TwinState:
    """Mirror of one vehicle's streams up to ``last_sync_t`` (inclusive)."""

    vehicle_id: str
    region_id: str
    last_sync_t: int
    mirrored_telemetry: TelemetryStream | None
    fused_context: ContextStream | None

    @classmethod
    def initial(cls, vehicle_id: str, region_id: str) -> "TwinState":
        return cls(vehicle_id=vehicle_id, region_id=region_id, last_sync_t=-1,
                   mirrored_telemetry=None, fused_context=None)

    @property
    def synced_steps(self) -> int:
        """Number of records currently mirrored."""
        if self.mirrored_telemetry is None:
            return 0
        return len(self.mirrored_telemetry)


def sync_twin(twin: TwinState, telemetry: TelemetryStream, context: ContextStream,
              now: int) -> TwinState:
    """Mirror both streams up to ``now`` and return the updated twin.

    Idempotent for the same ``now``; syncing backward raises.  ``last_sync_t``
    is capped at the stream length, so a twin is never marked fresher than the
    data that exists.
    """
    if now < twin.last_sync_t:
        raise TwinMonotonicityError(
            f"twin {twin.vehicle_id!r} synced at t={twin.last_sync_t}, "
            f"cannot move back to t={now}")
    if len(telemetry) != len(context):
        raise ValueError("telemetry and context streams must cover the same steps")
    effective = min(now, len(telemetry))
    cut = min(now + 1, len(telemetry))
    mirrored = replace(telemetry,
                       values=telemetry.values[:cut].copy(),
                       labels=telemetry.labels[:cut].copy())
    fused = replace(context,
                    weather=context.weather[:cut].copy(),
                    light_states=context.light_states[:cut].copy())
    return TwinState(vehicle_id=twin.vehicle_id, region_id=twin.region_id,
                     last_sync_t=effective, mirrored_telemetry=mirrored,
                     fused_context=fused)


def staleness(twin: TwinState, now: int) -> int:
    """Time steps elapsed since the twin last mirrored its source."""
    if now < twin.last_sync_t:
        raise TwinMonotonicityError(
            f"now={now} precedes the twin's last sync t={twin.last_sync_t}")
    return now - twin.last_sync_t


@dataclass(frozen=True)
class LocalDataset:
    """Fused numeric rows (telemetry ++ encoded context) with binary labels."""

    vehicle_id: str
    columns: tuple[str, ...]
    values: np.ndarray          # (rows, features) float64
    labels: np.ndarray          # (rows,) int64, 1 = anomalous
    start_t: int                # absolute time of the first row

    def __len__(self) -> int:
        return self.values.shape[0]


def _encode_context(context: ContextStream, start: int, end: int,
                    flag_cols: Sequence[str]) -> tuple[tuple[str, ...], np.ndarray]:
    n = end - start
    intersections = context.intersections
    light_cols = tuple(f"ctx_light{i}_{state}"
                       for i in range(intersections) for state in LIGHT_STATES)
    names = WEATHER_COLUMNS + light_cols + tuple(f"ctx_flag_{f}" for f in flag_cols)
    out = np.zeros((n, len(names)))
    out[:, 0:2] = context.weather[start:end]
    for i in range(intersections):
        states = context.light_states[start:end, i]
        for s in range(len(LIGHT_STATES)):
            out[:, 2 + i * len(LIGHT_STATES) + s] = (states == s).astype(float)
    active = set(context.active_flags)
    for j, flag in enumerate(flag_cols):
        if flag in active:
            out[:, 2 + intersections * len(LIGHT_STATES) + j] = 1.0
    return names, out


def snapshot_dataset(twin: TwinState, window: tuple[int, int],
                     flag_cols: Sequence[str] | None = None) -> LocalDataset:
    """Materialize the fused dataset for rows [start, end) of the twin mirror.

    Weather passes through as-is, traffic-light states become one-hot columns,
    policy flags become constant 0/1 columns over ``flag_cols`` (defaulting to
    the region's declared set).  Labels collapse every anomaly kind to 1.
    """
    start, end = window
    if start < 0 or start >= end:
        raise ValueError(f"invalid snapshot window [{start}, {end})")
    if twin.mirrored_telemetry is None or end > twin.last_sync_t + 1:
        raise TwinStalenessError(
            f"twin {twin.vehicle_id!r} is synced to t={twin.last_sync_t}; "
            f"cannot snapshot rows up to t={end - 1}")
    telemetry = twin.mirrored_telemetry
    context = twin.fused_context
    assert context is not None
    if flag_cols is None:
        flag_cols = sorted(context.declared_flags)
    ctx_names, ctx_values = _encode_context(context, start, end, flag_cols)
    values = np.concatenate([telemetry.values[start:end], ctx_values], axis=1)
    labels = (telemetry.labels[start:end] != NORMAL_LABEL).astype(np.int64)
    return LocalDataset(vehicle_id=twin.vehicle_id,
                        columns=telemetry.columns + ctx_names,
                        values=values, labels=labels, start_t=start)


def dataset_to_csv(dataset: LocalDataset, path: str | Path) -> None:
    """Same CSV layout as telemetry exports, with context columns appended."""
    lines = [",".join(dataset.columns + ("label",))]
    for i in range(len(dataset)):
        cells = [format(float(v), ".9g") for v in dataset.values[i]]
        cells.append(str(int(dataset.labels[i])))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

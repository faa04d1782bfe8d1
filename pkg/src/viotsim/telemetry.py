"""Synthetic vehicle telemetry and regional context generation.

Each vehicle produces a stream of sensor records (speed, engine temperature,
brake pressure, heading, plus any configured extras) driven by per-feature
mean-reverting random walks.  Each region produces a context stream: a seeded
weather walk, traffic lights cycling with a fixed period, and a set of policy
flags held constant for the run.  Labeled anomalies from a six-kind taxonomy
are injected into telemetry windows; the labels are the only ground truth and
are carried alongside the records, never inside the feature values.

All generation is pure: the same (id, steps, seed) always yields the same
stream, so vehicles can be generated independently and in any order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter


class AnomalyKind(enum.Enum):
    """The six anomaly classes injected into vehicle telemetry."""

    CONGESTION = "congestion"
    COLLISION = "collision"
    MALICIOUS_ATTACK = "malicious_attack"
    BREAKDOWN = "breakdown"
    TRAFFIC_VIOLATION = "traffic_violation"
    DRIVER_FATIGUE = "driver_fatigue"


# Index used for compact label storage: -1 = normal, else position here.
_KIND_ORDER = tuple(AnomalyKind)
_KIND_INDEX = {kind: i for i, kind in enumerate(_KIND_ORDER)}

NORMAL_LABEL = -1

CORE_ROLES = ("speed", "engine_temp", "brake_pressure", "heading")
FEATURE_ROLES = CORE_ROLES + ("extra",)


class WindowBoundsError(ValueError):
    """Anomaly window falls outside the stream."""


@dataclass(frozen=True)
class FeatureSpec:
    """Parameters of one telemetry feature's mean-reverting baseline walk.

    ``sigma`` is the stationary standard deviation of the walk and
    ``reversion`` the per-step pull toward ``mean`` (0 < reversion <= 1).
    """

    name: str
    role: str
    mean: float
    sigma: float
    reversion: float = 0.1

    def __post_init__(self):
        if self.role not in FEATURE_ROLES:
            raise ValueError(f"unknown feature role {self.role!r} for {self.name!r}")
        if not (0.0 < self.reversion <= 1.0):
            raise ValueError(f"feature {self.name!r}: reversion must be in (0, 1]")
        if self.sigma < 0.0:
            raise ValueError(f"feature {self.name!r}: sigma must be >= 0")


@dataclass(frozen=True)
class ContextSpec:
    """Parameters of one region's context stream."""

    intersections: int = 2
    light_period: int = 12
    policy_flags: tuple[str, ...] = ("speed-limit-50", "restricted-zone")
    temperature_mean: float = 15.0
    temperature_sigma: float = 4.0
    precipitation_mean: float = 0.3
    precipitation_sigma: float = 0.15
    weather_reversion: float = 0.1

    def __post_init__(self):
        if self.intersections < 0:
            raise ValueError("intersections must be >= 0")
        if self.light_period < 1:
            raise ValueError("light_period must be >= 1")


@dataclass(frozen=True)
class TelemetryRecord:
    t: int
    features: np.ndarray
    label: AnomalyKind | None


@dataclass(frozen=True)
class ContextRecord:
    t: int
    weather: np.ndarray
    light_states: tuple[int, ...]
    policy_flags: tuple[str, ...]


@dataclass(frozen=True)
class TelemetryStream:
    """Array-backed sequence of telemetry records for one vehicle.

    ``values`` is (steps, features) float64; ``labels`` is (steps,) int8 with
    -1 for normal and the AnomalyKind index otherwise.
    """

    vehicle_id: str
    features: tuple[FeatureSpec, ...]
    values: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def label_at(self, t: int) -> AnomalyKind | None:
        idx = int(self.labels[t])
        return None if idx == NORMAL_LABEL else _KIND_ORDER[idx]

    def record(self, t: int) -> TelemetryRecord:
        return TelemetryRecord(t=t, features=self.values[t].copy(), label=self.label_at(t))

    def anomalous_fraction(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.count_nonzero(self.labels != NORMAL_LABEL)) / len(self)

    def binary_labels(self) -> np.ndarray:
        """Ground truth as 0/1 (1 = anomalous of any kind)."""
        return (self.labels != NORMAL_LABEL).astype(np.int64)


@dataclass(frozen=True)
class ContextStream:
    """Array-backed sequence of context records for one region."""

    region_id: str
    weather: np.ndarray           # (steps, 2): temperature, precipitation index
    light_states: np.ndarray      # (steps, intersections) int8, 0=red 1=yellow 2=green
    active_flags: tuple[str, ...]     # constant for the run
    declared_flags: tuple[str, ...]   # the scenario-declared set
    light_period: int

    def __len__(self) -> int:
        return self.weather.shape[0]

    @property
    def intersections(self) -> int:
        return self.light_states.shape[1]

    def record(self, t: int) -> ContextRecord:
        return ContextRecord(
            t=t,
            weather=self.weather[t].copy(),
            light_states=tuple(int(s) for s in self.light_states[t]),
            policy_flags=self.active_flags,
        )


def _mean_reverting_walk(rng: np.random.Generator, steps: int, mean: float,
                         sigma: float, reversion: float) -> np.ndarray:
    """AR(1) walk with stationary mean ``mean`` and stationary std ``sigma``."""
    if steps == 0:
        return np.empty(0)
    phi = 1.0 - reversion
    step_sigma = sigma * math.sqrt(max(0.0, 1.0 - phi * phi))
    x0 = mean + sigma * rng.standard_normal()
    noise = step_sigma * rng.standard_normal(steps - 1)
    out = np.empty(steps)
    out[0] = x0
    if steps > 1:
        # d[t] = phi * d[t-1] + noise[t], seeded with the initial deviation.
        dev, _ = lfilter([1.0], [1.0, -phi], noise, zi=[phi * (x0 - mean)])
        out[1:] = mean + dev
    return out


def generate_stream(vehicle_id: str, steps: int, seed: int,
                    features: Sequence[FeatureSpec]) -> TelemetryStream:
    """Generate a vehicle's baseline telemetry stream; every label is normal."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rng = np.random.default_rng(seed)
    values = np.empty((steps, len(features)))
    for j, spec in enumerate(features):
        values[:, j] = _mean_reverting_walk(rng, steps, spec.mean, spec.sigma, spec.reversion)
    labels = np.full(steps, NORMAL_LABEL, dtype=np.int8)
    return TelemetryStream(vehicle_id=vehicle_id, features=tuple(features),
                           values=values, labels=labels)


def _role_column(stream: TelemetryStream, role: str) -> tuple[int, FeatureSpec]:
    for j, spec in enumerate(stream.features):
        if spec.role == role:
            return j, spec
    raise ValueError(f"stream {stream.vehicle_id!r} has no feature with role {role!r}")


def inject_anomaly(stream: TelemetryStream, kind: AnomalyKind,
                   window: tuple[int, int], seed: int,
                   sigma_multiplier: float = 4.0) -> TelemetryStream:
    """Return a copy of ``stream`` with ``kind`` injected over [start, end).

    Records inside the window are relabeled and their features perturbed by at
    least ``sigma_multiplier`` baseline standard deviations (clipped at
    physical floors such as speed >= 0).  Records outside the window are
    untouched, bit for bit.
    """
    start, end = window
    if start < 0 or end > len(stream) or start > end:
        raise WindowBoundsError(
            f"window [{start}, {end}) out of bounds for stream of length {len(stream)}")
    if start == end:
        return stream

    k = sigma_multiplier
    n = end - start
    rng = np.random.default_rng(seed)
    values = stream.values.copy()
    labels = stream.labels.copy()
    labels[start:end] = _KIND_INDEX[kind]

    if kind is AnomalyKind.CONGESTION:
        js, spec_s = _role_column(stream, "speed")
        jb, spec_b = _role_column(stream, "brake_pressure")
        # Crawl speeds (at most 10% of the normal mean, at least k sigma below
        # it) with elevated stop-and-go braking.
        ceiling = min(max(0.0, spec_s.mean - k * spec_s.sigma), 0.1 * spec_s.mean)
        values[start:end, js] = rng.uniform(0.0, 1.0, n) * ceiling
        values[start:end, jb] = values[start:end, jb] + (k + rng.uniform(0.0, 2.0, n)) * spec_b.sigma
    elif kind is AnomalyKind.COLLISION:
        jb, spec_b = _role_column(stream, "brake_pressure")
        js, spec_s = _role_column(stream, "speed")
        values[start:end, jb] = values[start:end, jb] + (k + rng.uniform(0.0, 3.0, n)) * spec_b.sigma
        drop = (k + rng.uniform(0.0, 3.0, n)) * spec_s.sigma
        values[start:end, js] = np.maximum(0.0, values[start:end, js] - drop)
    elif kind is AnomalyKind.MALICIOUS_ATTACK:
        for j, spec in enumerate(stream.features):
            sign = rng.choice((-1.0, 1.0), n)
            values[start:end, j] = spec.mean + sign * (k + rng.uniform(0.0, 4.0, n)) * spec.sigma
    elif kind is AnomalyKind.BREAKDOWN:
        jt, spec_t = _role_column(stream, "engine_temp")
        js, spec_s = _role_column(stream, "speed")
        # Overheating ramp with limp-mode speed loss.
        ramp = np.linspace(1.0, 2.0, n)
        values[start:end, jt] = values[start:end, jt] + k * spec_t.sigma * ramp
        drop = (k + rng.uniform(0.0, 2.0, n)) * spec_s.sigma
        values[start:end, js] = np.maximum(0.0, values[start:end, js] - drop)
    elif kind is AnomalyKind.TRAFFIC_VIOLATION:
        j, spec = _role_column(stream, "speed")
        values[start:end, j] = spec.mean + (k + rng.uniform(0.0, 3.0, n)) * spec.sigma
    elif kind is AnomalyKind.DRIVER_FATIGUE:
        jh, spec_h = _role_column(stream, "heading")
        js, spec_s = _role_column(stream, "speed")
        half = 4
        sign = np.where((np.arange(n) // half) % 2 == 0, 1.0, -1.0)
        values[start:end, jh] = values[start:end, jh] + sign * (k + rng.uniform(0.0, 3.0, n)) * spec_h.sigma
        # Uneven speed keeping tracks the weaving.
        values[start:end, js] = np.maximum(
            0.0, values[start:end, js] + sign * (k + rng.uniform(0.0, 1.0, n)) * spec_s.sigma)
    else:  # pragma: no cover - exhaustive over the enum
        raise ValueError(f"unhandled anomaly kind {kind}")

    return replace(stream, values=values, labels=labels)


def plan_anomaly_windows(steps: int, fraction: float, kinds: Sequence[AnomalyKind],
                         min_len: int, max_len: int, seed: int,
                         ) -> list[tuple[AnomalyKind, int, int]]:
    """Place non-overlapping anomaly windows covering ~``fraction`` of a stream.

    Windows are drawn with seeded lengths in [min_len, max_len] and uniform
    start positions; the last window is truncated so the total anomalous step
    count is exactly round(fraction * steps).  Kinds are assigned round-robin
    through a seeded shuffle, so every kind appears before any repeats.
    """
    if not (0.0 <= fraction < 1.0):
        raise ValueError("fraction must be in [0, 1)")
    if min_len < 1 or max_len < min_len:
        raise ValueError("need 1 <= min_len <= max_len")
    target = int(round(fraction * steps))
    if target == 0 or not kinds:
        return []
    rng = np.random.default_rng(seed)
    occupied = np.zeros(steps, dtype=bool)
    windows: list[tuple[AnomalyKind, int, int]] = []
    kind_cycle: list[AnomalyKind] = []
    placed = 0
    attempts = 0
    while placed < target and attempts < 10000:
        attempts += 1
        length = min(int(rng.integers(min_len, max_len + 1)), target - placed)
        if length > steps:
            break
        start = int(rng.integers(0, steps - length + 1))
        # Keep a one-step gap so adjacent windows stay distinct episodes.
        lo, hi = max(0, start - 1), min(steps, start + length + 1)
        if occupied[lo:hi].any():
            continue
        if not kind_cycle:
            kind_cycle = list(kinds)
            rng.shuffle(kind_cycle)
        kind = kind_cycle.pop()
        occupied[start:start + length] = True
        windows.append((kind, start, start + length))
        placed += length
    windows.sort(key=lambda w: w[1])
    return windows


def _light_pattern(period: int) -> np.ndarray:
    """One full signal cycle: green, then yellow, then red (0=red 1=yellow 2=green)."""
    green = max(1, int(round(period * 0.45)))
    yellow = max(1, int(round(period * 0.1)))
    if green + yellow >= period:
        green = max(1, period - 2)
        yellow = 1 if period > green else 0
    red = period - green - yellow
    return np.array([2] * green + [1] * yellow + [0] * red, dtype=np.int8)


def generate_context(region_id: str, steps: int, seed: int,
                     spec: ContextSpec) -> ContextStream:
    """Generate a region's context stream: weather walk, light cycles, flags."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    rng = np.random.default_rng(seed)
    weather = np.empty((steps, 2))
    weather[:, 0] = _mean_reverting_walk(rng, steps, spec.temperature_mean,
                                         spec.temperature_sigma, spec.weather_reversion)
    weather[:, 1] = _mean_reverting_walk(rng, steps, spec.precipitation_mean,
                                         spec.precipitation_sigma, spec.weather_reversion)

    pattern = _light_pattern(spec.light_period)
    offsets = rng.integers(0, spec.light_period, spec.intersections)
    lights = np.empty((steps, spec.intersections), dtype=np.int8)
    t_axis = np.arange(steps)
    for i in range(spec.intersections):
        lights[:, i] = pattern[(t_axis + int(offsets[i])) % spec.light_period]

    active = tuple(flag for flag in spec.policy_flags if rng.random() < 0.5)
    return ContextStream(region_id=region_id, weather=weather, light_states=lights,
                         active_flags=active, declared_flags=tuple(spec.policy_flags),
                         light_period=spec.light_period)


def _fmt(value: float) -> str:
    return format(float(value), ".9g")


def stream_to_csv(stream: TelemetryStream, path: str | Path) -> None:
    """Write one row per record: feature columns then the ground-truth label."""
    lines = [",".join(stream.columns + ("label",))]
    for t in range(len(stream)):
        label = stream.label_at(t)
        cells = [_fmt(v) for v in stream.values[t]]
        cells.append("normal" if label is None else label.value)
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

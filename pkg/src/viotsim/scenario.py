"""Scenario files, federation topology, and seed derivation.

A scenario is a JSON document that fully determines one simulation run: the
region/vendor/vehicle tree, telemetry generator parameters, the anomaly
injection plan, training hyperparameters, and evaluation settings.  All
downstream randomness is derived from ``master_seed`` through
``derive_stream_seed``, and every collection is kept in canonical (sorted)
order, so a scenario file reproduces a run bit for bit regardless of how its
entries were declared.

Schema (top-level keys): ``master_seed``, ``regions``, ``training``,
``telemetry``, ``evaluation``.  See ``scenarios/`` for complete examples.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

from .telemetry import AnomalyKind, ContextSpec, FeatureSpec, CORE_ROLES

NUM_LSTM_LAYERS = 2
DEFAULT_WINDOW = 4
DEFAULT_SERVER_LEARNING_RATE = 1.0
DEFAULT_THRESHOLD = 0.5

WEATHER_COLUMNS = ("ctx_temperature", "ctx_precipitation")
LIGHT_STATES = ("red", "yellow", "green")


class ScenarioFormatError(ValueError):
    """Scenario file could not be parsed."""


class ScenarioValidationError(ValueError):
    """Scenario content violates an invariant; the message names the field."""


@dataclass(frozen=True)
class VendorSpec:
    vendor_id: str
    vehicle_ids: tuple[str, ...]


@dataclass(frozen=True)
class RegionSpec:
    region_id: str
    vendors: tuple[VendorSpec, ...]
    context: ContextSpec


@dataclass(frozen=True)
class ModelDims:
    """Shape of the anomaly classifier; the layer count is fixed at two."""

    input_size: int
    hidden_size: int
    num_layers: int = NUM_LSTM_LAYERS

    def __post_init__(self):
        if self.input_size < 1:
            raise ScenarioValidationError("model input_size must be >= 1")
        if self.hidden_size < 1:
            raise ScenarioValidationError("model hidden_size must be >= 1")
        if self.num_layers != NUM_LSTM_LAYERS:
            raise ScenarioValidationError(f"num_layers is fixed at {NUM_LSTM_LAYERS}")


@dataclass(frozen=True)
class TrainingConfig:
    minibatch_size: int
    local_epochs: int
    learning_rate: float
    rounds: int
    dims: ModelDims
    server_learning_rate: float = DEFAULT_SERVER_LEARNING_RATE
    window: int = DEFAULT_WINDOW
    vendor_tier: bool = False

    def __post_init__(self):
        if self.minibatch_size < 1:
            raise ScenarioValidationError("training.minibatch_size must be >= 1")
        if self.local_epochs < 1:
            raise ScenarioValidationError("training.local_epochs must be >= 1")
        if self.rounds < 0:
            raise ScenarioValidationError("training.rounds must be >= 0")
        if self.window < 1:
            raise ScenarioValidationError("training.window must be >= 1")
        if not self.learning_rate > 0.0:
            raise ScenarioValidationError("training.learning_rate must be > 0")
        if not self.server_learning_rate > 0.0:
            raise ScenarioValidationError("training.server_learning_rate must be > 0")


@dataclass(frozen=True)
class AnomalyWindowSpec:
    vehicle_id: str
    kind: AnomalyKind
    start: int
    end: int


@dataclass(frozen=True)
class AnomalyPlan:
    """How labeled anomalies are placed: a random budget plus explicit windows."""

    fraction: float = 0.0
    kinds: tuple[AnomalyKind, ...] = tuple(AnomalyKind)
    min_len: int = 20
    max_len: int = 60
    sigma_multiplier: float = 4.0
    windows: tuple[AnomalyWindowSpec, ...] = ()


@dataclass(frozen=True)
class TelemetrySpec:
    steps_per_vehicle: int
    features: tuple[FeatureSpec, ...]
    anomalies: AnomalyPlan = AnomalyPlan()


@dataclass(frozen=True)
class EvaluationConfig:
    test_fraction: float
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not (0.0 < self.test_fraction < 1.0):
            raise ScenarioValidationError("evaluation.test_fraction must be in (0, 1)")
        if not (0.0 < self.threshold < 1.0):
            raise ScenarioValidationError("evaluation.threshold must be in (0, 1)")


@dataclass(frozen=True)
class ScenarioConfig:
    master_seed: int
    regions: tuple[RegionSpec, ...]
    training: TrainingConfig
    telemetry: TelemetrySpec
    evaluation: EvaluationConfig

    def vehicle_ids(self) -> list[str]:
        return [vid for region in self.regions
                for vendor in region.vendors
                for vid in vendor.vehicle_ids]


@dataclass(frozen=True)
class TopologyVendor:
    vendor_id: str
    vehicle_ids: tuple[str, ...]


@dataclass(frozen=True)
class TopologyRegion:
    region_id: str
    cloudlet_id: str
    vendors: tuple[TopologyVendor, ...]

    @property
    def vehicle_ids(self) -> tuple[str, ...]:
        return tuple(vid for vendor in self.vendors for vid in vendor.vehicle_ids)


@dataclass(frozen=True)
class FederationTopology:
    """The region/vendor/vehicle tree with one cloudlet per region."""

    regions: tuple[TopologyRegion, ...]
    n_clients: int

    def all_vehicle_ids(self) -> Iterator[str]:
        for region in self.regions:
            yield from region.vehicle_ids

    def region_of(self, vehicle_id: str) -> TopologyRegion:
        for region in self.regions:
            if vehicle_id in region.vehicle_ids:
                return region
        raise KeyError(vehicle_id)


def derive_stream_seed(master_seed: int, label: str | bytes) -> int:
    """Derive an independent 64-bit stream seed from the master seed.

    SHA-256 over (seed bytes, label) keeps unrelated streams collision
    resistant: distinct labels or distinct master seeds give unrelated seeds.
    """
    if master_seed < 0 or master_seed >= 2 ** 64:
        raise ValueError("master_seed must be an unsigned 64-bit integer")
    raw = label.encode("utf-8") if isinstance(label, str) else bytes(label)
    digest = hashlib.sha256(master_seed.to_bytes(8, "little") + b"|" + raw).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Parsing / serialization
# ---------------------------------------------------------------------------

def _require(mapping: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise ScenarioValidationError(f"{where}: missing required field {key!r}")
    return mapping[key]


def _check_keys(mapping: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ScenarioValidationError(f"{where}: unknown field(s) {sorted(unknown)}")


def _parse_feature(raw: Mapping[str, Any], where: str) -> FeatureSpec:
    _check_keys(raw, {"name", "role", "mean", "sigma", "reversion"}, where)
    try:
        return FeatureSpec(
            name=str(_require(raw, "name", where)),
            role=str(_require(raw, "role", where)),
            mean=float(_require(raw, "mean", where)),
            sigma=float(_require(raw, "sigma", where)),
            reversion=float(raw.get("reversion", 0.1)),
        )
    except ValueError as exc:
        raise ScenarioValidationError(f"{where}: {exc}") from exc


def _parse_context(raw: Mapping[str, Any], where: str) -> ContextSpec:
    _check_keys(raw, {"intersections", "light_period", "policy_flags",
                      "temperature_mean", "temperature_sigma",
                      "precipitation_mean", "precipitation_sigma",
                      "weather_reversion"}, where)
    defaults = ContextSpec()
    try:
        return ContextSpec(
            intersections=int(raw.get("intersections", defaults.intersections)),
            light_period=int(raw.get("light_period", defaults.light_period)),
            policy_flags=tuple(str(f) for f in raw.get("policy_flags", defaults.policy_flags)),
            temperature_mean=float(raw.get("temperature_mean", defaults.temperature_mean)),
            temperature_sigma=float(raw.get("temperature_sigma", defaults.temperature_sigma)),
            precipitation_mean=float(raw.get("precipitation_mean", defaults.precipitation_mean)),
            precipitation_sigma=float(raw.get("precipitation_sigma", defaults.precipitation_sigma)),
            weather_reversion=float(raw.get("weather_reversion", defaults.weather_reversion)),
        )
    except ValueError as exc:
        raise ScenarioValidationError(f"{where}: {exc}") from exc


def _parse_anomalies(raw: Mapping[str, Any], where: str) -> AnomalyPlan:
    _check_keys(raw, {"fraction", "kinds", "min_len", "max_len",
                      "sigma_multiplier", "windows"}, where)
    kind_by_value = {k.value: k for k in AnomalyKind}

    def to_kind(name: str) -> AnomalyKind:
        if name not in kind_by_value:
            raise ScenarioValidationError(
                f"{where}: unknown anomaly kind {name!r} "
                f"(expected one of {sorted(kind_by_value)})")
        return kind_by_value[name]

    windows = []
    for i, w in enumerate(raw.get("windows", [])):
        _check_keys(w, {"vehicle", "kind", "start", "end"}, f"{where}.windows[{i}]")
        windows.append(AnomalyWindowSpec(
            vehicle_id=str(_require(w, "vehicle", f"{where}.windows[{i}]")),
            kind=to_kind(str(_require(w, "kind", f"{where}.windows[{i}]"))),
            start=int(_require(w, "start", f"{where}.windows[{i}]")),
            end=int(_require(w, "end", f"{where}.windows[{i}]")),
        ))
    defaults = AnomalyPlan()
    kinds = tuple(to_kind(str(k)) for k in raw.get("kinds", [k.value for k in defaults.kinds]))
    plan = AnomalyPlan(
        fraction=float(raw.get("fraction", defaults.fraction)),
        kinds=kinds,
        min_len=int(raw.get("min_len", defaults.min_len)),
        max_len=int(raw.get("max_len", defaults.max_len)),
        sigma_multiplier=float(raw.get("sigma_multiplier", defaults.sigma_multiplier)),
        windows=tuple(windows),
    )
    if not (0.0 <= plan.fraction < 1.0):
        raise ScenarioValidationError(f"{where}.fraction must be in [0, 1)")
    if plan.min_len < 1 or plan.max_len < plan.min_len:
        raise ScenarioValidationError(f"{where}: need 1 <= min_len <= max_len")
    return plan


def flag_columns(regions: Sequence[RegionSpec]) -> tuple[str, ...]:
    """Sorted union of all declared policy flags: the shared encoding columns."""
    flags: set[str] = set()
    for region in regions:
        flags.update(region.context.policy_flags)
    return tuple(sorted(flags))


def context_columns(regions: Sequence[RegionSpec]) -> tuple[str, ...]:
    """Column names of the numeric context encoding shared by every region."""
    intersections = regions[0].context.intersections if regions else 0
    light_cols = tuple(f"ctx_light{i}_{state}"
                       for i in range(intersections) for state in LIGHT_STATES)
    flag_cols = tuple(f"ctx_flag_{name}" for name in flag_columns(regions))
    return WEATHER_COLUMNS + light_cols + flag_cols


def fused_input_size(regions: Sequence[RegionSpec], features: Sequence[FeatureSpec]) -> int:
    return len(features) + len(context_columns(regions))


def parse_scenario(data: Mapping[str, Any]) -> ScenarioConfig:
    """Validate a parsed JSON document and build the scenario config."""
    if not isinstance(data, Mapping):
        raise ScenarioValidationError("scenario root must be a JSON object")
    _check_keys(data, {"master_seed", "regions", "training", "telemetry", "evaluation"},
                "scenario")

    master_seed = int(_require(data, "master_seed", "scenario"))
    if master_seed < 0 or master_seed >= 2 ** 64:
        raise ScenarioValidationError("master_seed must be an unsigned 64-bit integer")

    raw_regions = _require(data, "regions", "scenario")
    if not raw_regions:
        raise ScenarioValidationError("regions: at least one region is required")
    regions = []
    for i, raw_region in enumerate(raw_regions):
        where = f"regions[{i}]"
        _check_keys(raw_region, {"id", "vendors", "context"}, where)
        region_id = str(_require(raw_region, "id", where))
        vendors = []
        for j, raw_vendor in enumerate(raw_region.get("vendors", [])):
            vwhere = f"{where}.vendors[{j}]"
            _check_keys(raw_vendor, {"id", "vehicles"}, vwhere)
            vendors.append(VendorSpec(
                vendor_id=str(_require(raw_vendor, "id", vwhere)),
                vehicle_ids=tuple(str(v) for v in _require(raw_vendor, "vehicles", vwhere)),
            ))
        regions.append(RegionSpec(
            region_id=region_id,
            vendors=tuple(vendors),
            context=_parse_context(raw_region.get("context", {}), f"{where}.context"),
        ))

    raw_telemetry = _require(data, "telemetry", "scenario")
    _check_keys(raw_telemetry, {"steps_per_vehicle", "features", "anomalies"}, "telemetry")
    features = tuple(_parse_feature(f, f"telemetry.features[{i}]")
                     for i, f in enumerate(_require(raw_telemetry, "features", "telemetry")))
    telemetry = TelemetrySpec(
        steps_per_vehicle=int(_require(raw_telemetry, "steps_per_vehicle", "telemetry")),
        features=features,
        anomalies=_parse_anomalies(raw_telemetry.get("anomalies", {}), "telemetry.anomalies"),
    )
    if telemetry.steps_per_vehicle < 0:
        raise ScenarioValidationError("telemetry.steps_per_vehicle must be >= 0")

    raw_training = _require(data, "training", "scenario")
    _check_keys(raw_training, {"minibatch_size", "local_epochs", "learning_rate", "rounds",
                               "server_learning_rate", "window", "hidden_size",
                               "vendor_tier"}, "training")
    dims = ModelDims(
        input_size=fused_input_size(regions, features),
        hidden_size=int(_require(raw_training, "hidden_size", "training")),
    )
    training = TrainingConfig(
        minibatch_size=int(_require(raw_training, "minibatch_size", "training")),
        local_epochs=int(_require(raw_training, "local_epochs", "training")),
        learning_rate=float(_require(raw_training, "learning_rate", "training")),
        rounds=int(_require(raw_training, "rounds", "training")),
        dims=dims,
        server_learning_rate=float(raw_training.get("server_learning_rate",
                                                    DEFAULT_SERVER_LEARNING_RATE)),
        window=int(raw_training.get("window", DEFAULT_WINDOW)),
        vendor_tier=bool(raw_training.get("vendor_tier", False)),
    )

    raw_eval = _require(data, "evaluation", "scenario")
    _check_keys(raw_eval, {"threshold", "test_fraction"}, "evaluation")
    evaluation = EvaluationConfig(
        test_fraction=float(_require(raw_eval, "test_fraction", "evaluation")),
        threshold=float(raw_eval.get("threshold", DEFAULT_THRESHOLD)),
    )

    config = ScenarioConfig(master_seed=master_seed, regions=tuple(regions),
                            training=training, telemetry=telemetry, evaluation=evaluation)
    _validate(config)
    return config


def _validate(config: ScenarioConfig) -> None:
    seen: set[str] = set()
    for region in config.regions:
        for owner, rid in (("regions", region.region_id),):
            if rid in seen:
                raise ScenarioValidationError(f"{owner}: duplicate id {rid!r}")
            seen.add(rid)
        for vendor in region.vendors:
            if vendor.vendor_id in seen:
                raise ScenarioValidationError(f"vendors: duplicate id {vendor.vendor_id!r}")
            seen.add(vendor.vendor_id)
            for vid in vendor.vehicle_ids:
                if vid in seen:
                    raise ScenarioValidationError(f"vehicles: duplicate id {vid!r}")
                seen.add(vid)

    if not config.vehicle_ids():
        raise ScenarioValidationError("regions: at least one vehicle is required")

    # The fused feature encoding must have the same width for every client.
    widths = {region.context.intersections for region in config.regions}
    if len(widths) > 1:
        raise ScenarioValidationError(
            "regions: all regions must declare the same number of intersections "
            "(the context encoding is shared by every client)")

    roles = [f.role for f in config.telemetry.features]
    for role in CORE_ROLES:
        if roles.count(role) != 1:
            raise ScenarioValidationError(
                f"telemetry.features: exactly one feature with role {role!r} is required")
    names = [f.name for f in config.telemetry.features]
    if len(set(names)) != len(names):
        raise ScenarioValidationError("telemetry.features: duplicate feature name")

    vids = set(config.vehicle_ids())
    steps = config.telemetry.steps_per_vehicle
    for i, w in enumerate(config.telemetry.anomalies.windows):
        if w.vehicle_id not in vids:
            raise ScenarioValidationError(
                f"telemetry.anomalies.windows[{i}]: unknown vehicle {w.vehicle_id!r}")
        if not (0 <= w.start <= w.end <= steps):
            raise ScenarioValidationError(
                f"telemetry.anomalies.windows[{i}]: window [{w.start}, {w.end}) "
                f"out of bounds for {steps} steps")


def load_scenario(path: str | Path) -> ScenarioConfig:
    """Load, parse, and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioFormatError(f"cannot read scenario file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(
            f"malformed scenario file {path}: {exc.msg} at line {exc.lineno}, "
            f"column {exc.colno}") from exc
    return parse_scenario(data)


def scenario_to_dict(config: ScenarioConfig) -> dict[str, Any]:
    """Canonical JSON-ready form of a config (collections in declared order)."""
    return {
        "master_seed": config.master_seed,
        "regions": [
            {
                "id": r.region_id,
                "context": {
                    "intersections": r.context.intersections,
                    "light_period": r.context.light_period,
                    "policy_flags": list(r.context.policy_flags),
                    "temperature_mean": r.context.temperature_mean,
                    "temperature_sigma": r.context.temperature_sigma,
                    "precipitation_mean": r.context.precipitation_mean,
                    "precipitation_sigma": r.context.precipitation_sigma,
                    "weather_reversion": r.context.weather_reversion,
                },
                "vendors": [
                    {"id": v.vendor_id, "vehicles": list(v.vehicle_ids)}
                    for v in r.vendors
                ],
            }
            for r in config.regions
        ],
        "training": {
            "minibatch_size": config.training.minibatch_size,
            "local_epochs": config.training.local_epochs,
            "learning_rate": config.training.learning_rate,
            "rounds": config.training.rounds,
            "server_learning_rate": config.training.server_learning_rate,
            "window": config.training.window,
            "hidden_size": config.training.dims.hidden_size,
            "vendor_tier": config.training.vendor_tier,
        },
        "telemetry": {
            "steps_per_vehicle": config.telemetry.steps_per_vehicle,
            "features": [
                {"name": f.name, "role": f.role, "mean": f.mean,
                 "sigma": f.sigma, "reversion": f.reversion}
                for f in config.telemetry.features
            ],
            "anomalies": {
                "fraction": config.telemetry.anomalies.fraction,
                "kinds": [k.value for k in config.telemetry.anomalies.kinds],
                "min_len": config.telemetry.anomalies.min_len,
                "max_len": config.telemetry.anomalies.max_len,
                "sigma_multiplier": config.telemetry.anomalies.sigma_multiplier,
                "windows": [
                    {"vehicle": w.vehicle_id, "kind": w.kind.value,
                     "start": w.start, "end": w.end}
                    for w in config.telemetry.anomalies.windows
                ],
            },
        },
        "evaluation": {
            "threshold": config.evaluation.threshold,
            "test_fraction": config.evaluation.test_fraction,
        },
    }


def save_scenario(config: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(config), indent=2) + "\n",
                          encoding="utf-8")


def scenario_digest(config: ScenarioConfig) -> str:
    """Digest over the canonically sorted form: declaration order does not matter."""
    canonical = scenario_to_dict(build_canonical_config(config))
    blob = json.dumps(canonical, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def build_canonical_config(config: ScenarioConfig) -> ScenarioConfig:
    """Same config with regions, vendors, and vehicles sorted by id."""
    regions = tuple(
        RegionSpec(
            region_id=r.region_id,
            vendors=tuple(sorted(
                (VendorSpec(v.vendor_id, tuple(sorted(v.vehicle_ids))) for v in r.vendors),
                key=lambda v: v.vendor_id)),
            context=r.context,
        )
        for r in sorted(config.regions, key=lambda r: r.region_id)
    )
    return ScenarioConfig(master_seed=config.master_seed, regions=regions,
                          training=config.training, telemetry=config.telemetry,
                          evaluation=config.evaluation)


def build_topology(config: ScenarioConfig) -> FederationTopology:
    """Build the canonical federation tree (everything sorted by id)."""
    seen: set[str] = set()
    for vid in config.vehicle_ids():
        if vid in seen:
            raise ScenarioValidationError(f"vehicles: duplicate id {vid!r}")
        seen.add(vid)
    canonical = build_canonical_config(config)
    regions = tuple(
        TopologyRegion(
            region_id=r.region_id,
            cloudlet_id=f"{r.region_id}/cloudlet",
            vendors=tuple(TopologyVendor(v.vendor_id, v.vehicle_ids) for v in r.vendors),
        )
        for r in canonical.regions
    )
    n_clients = sum(len(region.vehicle_ids) for region in regions)
    return FederationTopology(regions=regions, n_clients=n_clients)

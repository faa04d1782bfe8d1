"""The anomaly classifier: a 2-layer LSTM with a sigmoid head, from scratch.

Parameters live in one flat float64 vector with named views (per layer: the
stacked input/forget/cell/output gate weights, recurrent weights, and biases;
then the fully connected head).  The flat layout makes weight deltas, SGD,
federated aggregation, finite-difference checks, and checkpointing all plain
vector arithmetic.

The forward pass unrolls both layers over the window; the second layer
consumes the first layer's hidden sequence, and the head applies a sigmoid to
an affine map of the second layer's final hidden state.  Training is exact
backpropagation through time on mean binary cross-entropy, with the loss
computed from logits in log-sum-exp form so saturated outputs stay finite.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .pipeline import Batch, NormStats, SequenceSet
from .scenario import ModelDims, TrainingConfig, derive_stream_seed

GATE_NAMES = ("input", "forget", "cell", "output")


class TrainingDivergenceError(RuntimeError):
    """Gradients or parameters stopped being finite."""


class EmptyTrainingData(ValueError):
    """A client has no sequences to train on; federation skips it."""


def _layer_input_size(dims: ModelDims, layer: int) -> int:
    return dims.input_size if layer == 0 else dims.hidden_size


def param_length(dims: ModelDims) -> int:
    h = dims.hidden_size
    total = 0
    for layer in range(dims.num_layers):
        total += 4 * h * _layer_input_size(dims, layer)  # gate input weights
        total += 4 * h * h                               # gate recurrent weights
        total += 4 * h                                   # gate biases
    total += h + 1                                       # head weights + bias
    return total


@dataclass(frozen=True)
class LayerViews:
    """Views into the flat vector for one LSTM layer (gate order i, f, g, o)."""

    w_in: np.ndarray    # (4H, layer input)
    w_rec: np.ndarray   # (4H, H)
    bias: np.ndarray    # (4H,)


class ParamVector:
    """Flat float64 parameter vector with structured views."""

    __slots__ = ("dims", "data")

    def __init__(self, dims: ModelDims, data: np.ndarray):
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (param_length(dims),):
            raise ValueError(
                f"expected {param_length(dims)} parameters, got shape {data.shape}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):  # immutable by convention; guard rebinding
        raise AttributeError("parameter vectors cannot be rebound; use .data views")

    @classmethod
    def zeros(cls, dims: ModelDims):
        return cls(dims, np.zeros(param_length(dims)))

    def copy(self):
        return type(self)(self.dims, self.data.copy())

    def _layer_offset(self, layer: int) -> int:
        h = self.dims.hidden_size
        offset = 0
        for l in range(layer):
            offset += 4 * h * (_layer_input_size(self.dims, l) + h + 1)
        return offset

    def layer(self, layer: int) -> LayerViews:
        h = self.dims.hidden_size
        in_size = _layer_input_size(self.dims, layer)
        offset = self._layer_offset(layer)
        w_in = self.data[offset:offset + 4 * h * in_size].reshape(4 * h, in_size)
        offset += 4 * h * in_size
        w_rec = self.data[offset:offset + 4 * h * h].reshape(4 * h, h)
        offset += 4 * h * h
        bias = self.data[offset:offset + 4 * h]
        return LayerViews(w_in=w_in, w_rec=w_rec, bias=bias)

    @property
    def head_w(self) -> np.ndarray:
        h = self.dims.hidden_size
        return self.data[-(h + 1):-1]

    @property
    def head_b(self) -> np.ndarray:
        return self.data[-1:]

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParamVector) and self.dims == other.dims
                and np.array_equal(self.data, other.data))


class ModelParameters(ParamVector):
    """A full set of classifier weights (a client's w or the shared model)."""


class WeightDelta(ParamVector):
    """Difference of two parameter sets; the unit of federated exchange."""


def parameter_groups(dims: ModelDims) -> Iterator[tuple[str, slice]]:
    """Named flat slices: per layer and gate the W/U matrices and bias, plus head."""
    h = dims.hidden_size
    offset = 0
    for layer in range(dims.num_layers):
        in_size = _layer_input_size(dims, layer)
        for kind, width in (("w_in", in_size), ("w_rec", h)):
            for g, gate in enumerate(GATE_NAMES):
                start = offset + g * h * width
                yield f"layer{layer + 1}/{kind}/{gate}", slice(start, start + h * width)
            offset += 4 * h * width
        for g, gate in enumerate(GATE_NAMES):
            yield f"layer{layer + 1}/bias/{gate}", slice(offset + g * h, offset + (g + 1) * h)
        offset += 4 * h
    yield "head/weights", slice(offset, offset + h)
    yield "head/bias", slice(offset + h, offset + h + 1)


def init_params(dims: ModelDims, seed: int) -> ModelParameters:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights; forget biases 1, rest 0."""
    rng = np.random.default_rng(seed)
    params = ModelParameters.zeros(dims)
    h = dims.hidden_size
    for layer in range(dims.num_layers):
        views = params.layer(layer)
        bound_in = 1.0 / np.sqrt(_layer_input_size(dims, layer))
        bound_rec = 1.0 / np.sqrt(h)
        views.w_in[:] = rng.uniform(-bound_in, bound_in, views.w_in.shape)
        views.w_rec[:] = rng.uniform(-bound_rec, bound_rec, views.w_rec.shape)
        views.bias[:] = 0.0
        views.bias[h:2 * h] = 1.0  # forget gate
    params.head_w[:] = rng.uniform(-1.0 / np.sqrt(h), 1.0 / np.sqrt(h), h)
    params.head_b[:] = 0.0
    return params


@dataclass(frozen=True)
class HiddenState:
    """One step's hidden and cell vectors for one layer."""

    h: np.ndarray
    c: np.ndarray


@dataclass
class _LayerCache:
    x_seq: np.ndarray     # (T, B, in)
    gates: np.ndarray     # (T, 4, B, H) activated i, f, g, o
    c_seq: np.ndarray     # (T, B, H)
    tanh_c: np.ndarray    # (T, B, H)
    h_seq: np.ndarray     # (T, B, H)


def _layer_forward(views: LayerViews, x_seq: np.ndarray) -> _LayerCache:
    steps, batch, _ = x_seq.shape
    h = views.w_rec.shape[1]
    gates = np.empty((steps, 4, batch, h))
    c_seq = np.empty((steps, batch, h))
    tanh_c = np.empty((steps, batch, h))
    h_seq = np.empty((steps, batch, h))
    h_prev = np.zeros((batch, h))
    c_prev = np.zeros((batch, h))
    for t in range(steps):
        z = x_seq[t] @ views.w_in.T + h_prev @ views.w_rec.T + views.bias
        i = expit(z[:, 0 * h:1 * h])
        f = expit(z[:, 1 * h:2 * h])
        g = np.tanh(z[:, 2 * h:3 * h])
        o = expit(z[:, 3 * h:4 * h])
        c = f * c_prev + i * g
        tc = np.tanh(c)
        gates[t, 0], gates[t, 1], gates[t, 2], gates[t, 3] = i, f, g, o
        c_seq[t] = c
        tanh_c[t] = tc
        h_seq[t] = o * tc
        h_prev, c_prev = h_seq[t], c
    return _LayerCache(x_seq=x_seq, gates=gates, c_seq=c_seq, tanh_c=tanh_c, h_seq=h_seq)


def _layer_backward(views: LayerViews, cache: _LayerCache, dh_seq: np.ndarray,
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    steps, batch, in_size = cache.x_seq.shape
    h = views.w_rec.shape[1]
    d_w_in = np.zeros_like(views.w_in)
    d_w_rec = np.zeros_like(views.w_rec)
    d_bias = np.zeros_like(views.bias)
    dx_seq = np.empty_like(cache.x_seq)
    dh_next = np.zeros((batch, h))
    dc_next = np.zeros((batch, h))
    dz = np.empty((batch, 4 * h))
    for t in reversed(range(steps)):
        i, f, g, o = cache.gates[t]
        tc = cache.tanh_c[t]
        c_prev = cache.c_seq[t - 1] if t > 0 else np.zeros((batch, h))
        h_prev = cache.h_seq[t - 1] if t > 0 else np.zeros((batch, h))
        dh = dh_seq[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, 0 * h:1 * h] = dc * g * i * (1.0 - i)
        dz[:, 1 * h:2 * h] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
        dz[:, 3 * h:4 * h] = dh * tc * o * (1.0 - o)
        d_w_in += dz.T @ cache.x_seq[t]
        d_w_rec += dz.T @ h_prev
        d_bias += dz.sum(axis=0)
        dx_seq[t] = dz @ views.w_in
        dh_next = dz @ views.w_rec
        dc_next = dc * f
    return dx_seq, d_w_in, d_w_rec, d_bias


def _forward_all(params: ModelParameters, x: np.ndarray,
                 ) -> tuple[list[_LayerCache], np.ndarray]:
    """Run both layers plus the head; returns per-layer caches and logits (B,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != params.dims.input_size:
        raise ValueError(
            f"expected windows shaped (count, window, {params.dims.input_size}), "
            f"got {x.shape}")
    x_seq = np.ascontiguousarray(np.swapaxes(x, 0, 1))  # (T, B, F)
    caches: list[_LayerCache] = []
    for layer in range(params.dims.num_layers):
        cache = _layer_forward(params.layer(layer), x_seq)
        caches.append(cache)
        x_seq = cache.h_seq
    logits = caches[-1].h_seq[-1] @ params.head_w + params.head_b[0]
    return caches, logits


_PROB_FLOOR = np.finfo(np.float64).tiny
_PROB_CEIL = 1.0 - np.finfo(np.float64).epsneg


def _probabilities(logits: np.ndarray) -> np.ndarray:
    # Clip into the open interval so saturated logits never report exactly 0 or 1.
    return np.clip(expit(logits), _PROB_FLOOR, _PROB_CEIL)


def lstm_forward(params: ModelParameters, window: np.ndarray,
                 ) -> tuple[tuple[tuple[HiddenState, ...], ...], float]:
    """Classify one window; returns the full per-layer hidden trace and p(anomaly)."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError("window must be 2-D (steps, features)")
    caches, logits = _forward_all(params, window[None, :, :])
    trace = tuple(
        tuple(HiddenState(h=cache.h_seq[t, 0].copy(), c=cache.c_seq[t, 0].copy())
              for t in range(cache.h_seq.shape[0]))
        for cache in caches
    )
    return trace, float(_probabilities(logits)[0])


def batch_loss(params: ModelParameters, x: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy, computed from logits in log-sum-exp form."""
    _, logits = _forward_all(params, x)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, logits) - y * logits))


def backward(params: ModelParameters, batch: Batch) -> tuple[WeightDelta, float]:
    """Exact BPTT gradients of the mean BCE loss for one minibatch."""
    if len(batch) == 0:
        raise EmptyTrainingData("cannot compute gradients for an empty batch")
    caches, logits = _forward_all(params, batch.x)
    y = np.asarray(batch.y, dtype=np.float64)
    n = len(batch)
    loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))

    dlogits = (expit(logits) - y) / n
    grads = WeightDelta.zeros(params.dims)
    steps = caches[-1].h_seq.shape[0]
    grads.head_w[:] = caches[-1].h_seq[-1].T @ dlogits
    grads.head_b[:] = dlogits.sum()

    dh_seq = np.zeros_like(caches[-1].h_seq)
    dh_seq[-1] = np.outer(dlogits, params.head_w)
    for layer in reversed(range(params.dims.num_layers)):
        views = params.layer(layer)
        gviews = grads.layer(layer)
        dx_seq, d_w_in, d_w_rec, d_bias = _layer_backward(views, caches[layer], dh_seq)
        gviews.w_in[:] = d_w_in
        gviews.w_rec[:] = d_w_rec
        gviews.bias[:] = d_bias
        dh_seq = dx_seq
    return grads, loss


def sgd_step(params: ModelParameters, grads: WeightDelta,
             learning_rate: float) -> ModelParameters:
    if not grads.is_finite():
        raise TrainingDivergenceError("non-finite gradient")
    return ModelParameters(params.dims, params.data - learning_rate * grads.data)


def predict(params: ModelParameters, windows: np.ndarray) -> np.ndarray:
    """Anomaly probabilities, strictly inside (0, 1)."""
    if len(windows) == 0:
        return np.empty(0)
    _, logits = _forward_all(params, windows)
    return _probabilities(logits)


def classify_at(params: ModelParameters, windows: np.ndarray,
                threshold: float) -> np.ndarray:
    """Hard 0/1 labels; a probability equal to the threshold counts as positive."""
    return (predict(params, windows) >= threshold).astype(np.int64)


@dataclass(frozen=True)
class TrainStats:
    epoch_mean_losses: tuple[float, ...]
    epoch_mean_grad_norms: tuple[float, ...]
    sgd_steps: int

    @property
    def final_loss(self) -> float:
        return self.epoch_mean_losses[-1]

    def __post_init__(self):
        if any(loss < 0.0 for loss in self.epoch_mean_losses):
            raise ValueError("losses must be non-negative")


@dataclass(frozen=True)
class LocalTrainResult:
    params: ModelParameters
    delta: WeightDelta
    stats: TrainStats


def train_local(shared: ModelParameters, data: SequenceSet, cfg: TrainingConfig,
                client_seed: int) -> LocalTrainResult:
    """H epochs of minibatch SGD starting from the shared model.

    The shared parameters are never mutated; the returned delta is the
    client's final parameters minus the shared starting point.
    """
    from .pipeline import split_batches

    if len(data) == 0:
        raise EmptyTrainingData("client has an empty sequence set")
    params = ModelParameters(shared.dims, shared.data.copy())
    epoch_losses = []
    epoch_grad_norms = []
    steps = 0
    for epoch in range(cfg.local_epochs):
        epoch_seed = derive_stream_seed(client_seed, f"epoch:{epoch}")
        losses = []
        norms = []
        for batch in split_batches(data, cfg.minibatch_size, epoch_seed):
            grads, loss = backward(params, batch)
            params = sgd_step(params, grads, cfg.learning_rate)
            losses.append(loss)
            norms.append(grads.norm())
            steps += 1
        epoch_losses.append(float(np.mean(losses)))
        epoch_grad_norms.append(float(np.mean(norms)))
    delta = WeightDelta(shared.dims, params.data - shared.data)
    stats = TrainStats(epoch_mean_losses=tuple(epoch_losses),
                       epoch_mean_grad_norms=tuple(epoch_grad_norms),
                       sgd_steps=steps)
    return LocalTrainResult(params=params, delta=delta, stats=stats)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    max_rel_error: float
    group_errors: dict[str, float]

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error <= tolerance


def gradient_check(params: ModelParameters, batch: Batch,
                   epsilon: float = 1e-5) -> GradCheckResult:
    """Compare BPTT gradients against central finite differences, per group.

    Relative error uses max(|analytic|, |numeric|, 1e-6) as the denominator so
    sub-noise-floor components do not register false mismatches.
    """
    analytic, _ = backward(params, batch)
    numeric = np.empty_like(analytic.data)
    probe = params.copy()
    for idx in range(probe.data.size):
        original = probe.data[idx]
        probe.data[idx] = original + epsilon
        loss_plus = batch_loss(probe, batch.x, batch.y)
        probe.data[idx] = original - epsilon
        loss_minus = batch_loss(probe, batch.x, batch.y)
        probe.data[idx] = original
        numeric[idx] = (loss_plus - loss_minus) / (2.0 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic.data), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic.data - numeric) / denom
    group_errors = {name: float(rel[sl].max()) if rel[sl].size else 0.0
                    for name, sl in parameter_groups(params.dims)}
    return GradCheckResult(max_rel_error=float(rel.max()), group_errors=group_errors)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"VIOTCKPT"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class Checkpoint:
    params: ModelParameters
    norm_stats: dict[str, NormStats]
    threshold: float
    columns: tuple[str, ...]


def save_checkpoint(path: str | Path, params: ModelParameters,
                    norm_stats: Mapping[str, NormStats], threshold: float,
                    columns: Sequence[str]) -> None:
    """Versioned binary dump; floats are stored as raw bytes so the round trip
    is bit-exact."""
    arrays: list[tuple[str, np.ndarray]] = [("params", params.data)]
    for vid in sorted(norm_stats):
        arrays.append((f"min:{vid}", norm_stats[vid].mins))
        arrays.append((f"max:{vid}", norm_stats[vid].maxs))
    header = {
        "dims": {"input_size": params.dims.input_size,
                 "hidden_size": params.dims.hidden_size,
                 "num_layers": params.dims.num_layers},
        "threshold": float(threshold).hex(),
        "columns": list(columns),
        "vehicles": sorted(norm_stats),
        "arrays": [{"name": name, "len": int(arr.size)} for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(_CKPT_VERSION.to_bytes(4, "little"))
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    pos = len(_CKPT_MAGIC)
    version = int.from_bytes(raw[pos:pos + 4], "little")
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos += 4
    header_len = int.from_bytes(raw[pos:pos + 8], "little")
    pos += 8
    header = json.loads(raw[pos:pos + header_len].decode("utf-8"))
    pos += header_len
    dims = ModelDims(**header["dims"])
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        n = entry["len"]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).copy()
        pos += 8 * n
    columns = tuple(header["columns"])
    norm_stats = {
        vid: NormStats(columns=columns, mins=arrays[f"min:{vid}"], maxs=arrays[f"max:{vid}"])
        for vid in header["vehicles"]
    }
    return Checkpoint(params=ModelParameters(dims, arrays["params"]),
                      norm_stats=norm_stats,
                      threshold=float.fromhex(header["threshold"]),
                      columns=columns)

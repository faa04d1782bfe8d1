import math

import numpy as np
import pytest

from viotsim.model import (
    EmptyTrainingData,
    HiddenState,
    ModelParameters,
    TrainingDivergenceError,
    WeightDelta,
    backward,
    batch_loss,
    classify_at,
    gradient_check,
    init_params,
    load_checkpoint,
    lstm_forward,
    parameter_groups,
    param_length,
    predict,
    save_checkpoint,
    sgd_step,
    train_local,
)
from viotsim.pipeline import Batch, NormStats, SequenceSet
from viotsim.scenario import ModelDims, TrainingConfig

DIMS = ModelDims(input_size=2, hidden_size=3)


def small_params(seed=1, dims=DIMS):
    return init_params(dims, seed)


# ---------------------------------------------------------------------------
# Independent scalar oracle: per-element LSTM recurrence with no vectorization.
# Written against the standard cell equations before the array implementation
# was tuned; keep it dumb on purpose.
# ---------------------------------------------------------------------------

def _sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def oracle_forward(params: ModelParameters, window: np.ndarray) -> float:
    dims = params.dims
    hsize = dims.hidden_size
    layer_input = [list(map(float, row)) for row in window]
    for layer_idx in range(dims.num_layers):
        views = params.layer(layer_idx)
        in_size = len(layer_input[0])
        h = [0.0] * hsize
        c = [0.0] * hsize
        outputs = []
        for x_row in layer_input:
            new_h = [0.0] * hsize
            new_c = [0.0] * hsize
            for unit in range(hsize):
                def gate_pre(gate_idx):
                    row = gate_idx * hsize + unit
                    total = float(views.bias[row])
                    for j in range(in_size):
                        total += float(views.w_in[row, j]) * x_row[j]
                    for j in range(hsize):
                        total += float(views.w_rec[row, j]) * h[j]
                    return total

                i_g = _sigmoid(gate_pre(0))
                f_g = _sigmoid(gate_pre(1))
                g_g = math.tanh(gate_pre(2))
                o_g = _sigmoid(gate_pre(3))
                new_c[unit] = f_g * c[unit] + i_g * g_g
                new_h[unit] = o_g * math.tanh(new_c[unit])
            h, c = new_h, new_c
            outputs.append(list(h))
        layer_input = outputs
    logit = float(params.head_b[0])
    for j in range(hsize):
        logit += float(params.head_w[j]) * layer_input[-1][j]
    return _sigmoid(logit)


class TestForward:
    def test_zero_params_zero_input(self):
        params = ModelParameters.zeros(DIMS)
        trace, prob = lstm_forward(params, np.zeros((4, 2)))
        for layer in trace:
            for state in layer:
                assert (state.h == 0.0).all()
                assert (state.c == 0.0).all()
        assert prob == 0.5

    def test_trace_shape(self):
        trace, _ = lstm_forward(small_params(), np.random.default_rng(0).uniform(0, 1, (4, 2)))
        assert len(trace) == 2
        assert all(len(layer) == 4 for layer in trace)
        assert all(state.h.shape == (3,) for layer in trace for state in layer)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(12)
        params = small_params(seed=7)
        params.data[:] = rng.normal(0, 0.5, params.data.shape)
        for _ in range(5):
            window = rng.normal(0, 1, (4, 2))
            _, prob = lstm_forward(params, window)
            assert prob == pytest.approx(oracle_forward(params, window), abs=1e-10)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            lstm_forward(small_params(), np.zeros((4, 5)))

    def test_probabilities_open_interval_at_saturation(self):
        params = ModelParameters.zeros(DIMS)
        params.head_b[:] = 500.0
        probs = predict(params, np.zeros((3, 4, 2)))
        assert (probs < 1.0).all() and (probs > 0.0).all()
        params.head_b[:] = -500.0
        probs = predict(params, np.zeros((3, 4, 2)))
        assert (probs > 0.0).all()
        assert np.isfinite(batch_loss(params, np.zeros((3, 4, 2)), np.ones(3)))


class TestInitParams:
    def test_deterministic(self):
        a = init_params(DIMS, 5)
        b = init_params(DIMS, 5)
        assert np.array_equal(a.data, b.data)

    def test_shapes(self):
        params = init_params(DIMS, 5)
        layer0 = params.layer(0)
        assert layer0.w_in.shape == (12, 2)
        assert layer0.w_rec.shape == (12, 3)
        assert layer0.bias.shape == (12,)
        layer1 = params.layer(1)
        assert layer1.w_in.shape == (12, 3)
        assert params.head_w.shape == (3,)
        assert param_length(DIMS) == params.data.size

    def test_forget_bias_one_rest_zero(self):
        params = init_params(DIMS, 5)
        for layer_idx in range(2):
            bias = params.layer(layer_idx).bias
            assert (bias[3:6] == 1.0).all()
            assert (bias[:3] == 0.0).all()
            assert (bias[6:] == 0.0).all()
        assert params.head_b[0] == 0.0

    def test_bound_sweep_over_seeds(self):
        dims = ModelDims(input_size=5, hidden_size=4)
        for seed in range(100):
            params = init_params(dims, seed)
            assert np.abs(params.layer(0).w_in).max() <= 1.0 / math.sqrt(5)
            assert np.abs(params.layer(0).w_rec).max() <= 1.0 / math.sqrt(4)
            assert np.abs(params.layer(1).w_in).max() <= 1.0 / math.sqrt(4)
            assert np.abs(params.head_w).max() <= 1.0 / math.sqrt(4)


def random_batch(n=5, window=4, dims=DIMS, seed=3):
    rng = np.random.default_rng(seed)
    return Batch(x=rng.uniform(0, 1, (n, window, dims.input_size)),
                 y=rng.integers(0, 2, n).astype(np.int64))


class TestBackward:
    def test_gradient_check_per_group(self):
        params = small_params(seed=11)
        result = gradient_check(params, random_batch())
        assert result.max_rel_error <= 1e-4
        expected_groups = dict(parameter_groups(DIMS))
        assert set(result.group_errors) == set(expected_groups)
        # 4 gates x (w_in, w_rec, bias) x 2 layers + head weights and bias
        assert len(expected_groups) == 26
        for name, err in result.group_errors.items():
            assert err <= 1e-4, name

    def test_duplicated_batch_same_mean_gradient(self):
        params = small_params(seed=4)
        batch = random_batch(n=3, seed=8)
        doubled = Batch(x=np.concatenate([batch.x, batch.x]),
                        y=np.concatenate([batch.y, batch.y]))
        grads_a, loss_a = backward(params, batch)
        grads_b, loss_b = backward(params, doubled)
        assert loss_a == pytest.approx(loss_b, rel=1e-12)
        assert np.allclose(grads_a.data, grads_b.data, atol=1e-12)

    def test_batch_size_scales_like_mean(self):
        # Mean loss over a batch = average of single-sample losses, so the
        # batch gradient equals the average of per-sample gradients.
        params = small_params(seed=4)
        batch = random_batch(n=4, seed=9)
        grads, _ = backward(params, batch)
        singles = np.zeros_like(grads.data)
        for i in range(4):
            g, _ = backward(params, Batch(x=batch.x[i:i + 1], y=batch.y[i:i + 1]))
            singles += g.data
        assert np.allclose(grads.data, singles / 4.0, atol=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(EmptyTrainingData):
            backward(small_params(), Batch(x=np.empty((0, 4, 2)), y=np.empty(0)))


class TestSgdStep:
    def test_zero_gradient_no_move(self):
        params = small_params()
        out = sgd_step(params, WeightDelta.zeros(DIMS), 0.1)
        assert np.array_equal(out.data, params.data)

    def test_zero_rate_no_move(self):
        params = small_params()
        grads, _ = backward(params, random_batch())
        out = sgd_step(params, grads, 0.0)
        assert np.array_equal(out.data, params.data)

    def test_step_reduces_loss_for_small_rate(self):
        params = small_params(seed=6)
        batch = random_batch(n=8, seed=10)
        grads, loss = backward(params, batch)
        stepped = sgd_step(params, grads, 0.01)
        assert batch_loss(stepped, batch.x, batch.y) < loss

    def test_non_finite_gradient_rejected(self):
        grads = WeightDelta.zeros(DIMS)
        grads.data[0] = np.nan
        with pytest.raises(TrainingDivergenceError):
            sgd_step(small_params(), grads, 0.1)


def training_config(**overrides):
    defaults = dict(minibatch_size=4, local_epochs=2, learning_rate=0.1,
                    rounds=1, dims=DIMS)
    defaults.update(overrides)
    return TrainingConfig(**defaults)


def separable_sequences(n=60, seed=14):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n).astype(np.int64)
    x = rng.uniform(0.4, 0.6, (n, 4, 2))
    x[y == 1] += 0.4
    return SequenceSet(x=x, y=y)


class TestTrainLocal:
    def test_step_count(self):
        data = separable_sequences(n=10)
        result = train_local(small_params(), data, training_config(local_epochs=3), 7)
        assert result.stats.sgd_steps == 3 * math.ceil(10 / 4)

    def test_tiny_rate_tiny_delta(self):
        data = separable_sequences(n=10)
        result = train_local(small_params(), data,
                             training_config(learning_rate=1e-12), 7)
        assert result.delta.norm() < 1e-9

    def test_shared_model_not_mutated(self):
        shared = small_params()
        before = shared.data.copy()
        train_local(shared, separable_sequences(), training_config(), 7)
        assert np.array_equal(shared.data, before)

    def test_loss_decreases_on_separable_data(self):
        result = train_local(small_params(), separable_sequences(n=200),
                             training_config(local_epochs=5), 7)
        assert result.stats.epoch_mean_losses[-1] < result.stats.epoch_mean_losses[0]

    def test_delta_is_params_minus_shared(self):
        shared = small_params()
        result = train_local(shared, separable_sequences(), training_config(), 7)
        assert np.array_equal(result.delta.data, result.params.data - shared.data)

    def test_empty_data_signals_skip(self):
        empty = SequenceSet(x=np.empty((0, 4, 2)), y=np.empty(0, dtype=np.int64))
        with pytest.raises(EmptyTrainingData):
            train_local(small_params(), empty, training_config(), 7)

    def test_deterministic_given_seed(self):
        a = train_local(small_params(), separable_sequences(), training_config(), 7)
        b = train_local(small_params(), separable_sequences(), training_config(), 7)
        assert np.array_equal(a.params.data, b.params.data)


class TestPredict:
    def test_threshold_boundary_counts_positive(self):
        params = ModelParameters.zeros(DIMS)  # all logits 0 -> p = 0.5
        labels = classify_at(params, np.zeros((2, 4, 2)), 0.5)
        assert (labels == 1).all()

    def test_raising_threshold_never_adds_positives(self):
        params = small_params(seed=3)
        windows = np.random.default_rng(2).uniform(0, 1, (30, 4, 2))
        previous = None
        for tau in (0.1, 0.3, 0.5, 0.7, 0.9):
            count = classify_at(params, windows, tau).sum()
            if previous is not None:
                assert count <= previous
            previous = count

    def test_saturated_bias(self):
        params = ModelParameters.zeros(DIMS)
        params.head_b[:] = 20.0
        probs = predict(params, np.zeros((1, 4, 2)))
        assert probs[0] > 0.999999


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = small_params(seed=9)
        stats = {
            "SV-1": NormStats(columns=("a", "b"), mins=np.array([0.1, -2.0]),
                              maxs=np.array([1.7, 9.0])),
            "SV-2": NormStats(columns=("a", "b"), mins=np.array([0.3, 0.0]),
                              maxs=np.array([2.0, 1.0])),
        }
        path = tmp_path / "checkpoint.bin"
        save_checkpoint(path, params, stats, threshold=0.37, columns=("a", "b"))
        loaded = load_checkpoint(path)
        assert np.array_equal(loaded.params.data, params.data)
        assert loaded.params.dims == DIMS
        assert loaded.threshold == 0.37
        assert loaded.columns == ("a", "b")
        for vid in stats:
            assert np.array_equal(loaded.norm_stats[vid].mins, stats[vid].mins)
            assert np.array_equal(loaded.norm_stats[vid].maxs, stats[vid].maxs)

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(path)

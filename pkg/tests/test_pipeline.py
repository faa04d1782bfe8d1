import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viotsim.pipeline import (
    Batch,
    NumericMatrix,
    SequenceSet,
    make_sequences,
    normalize,
    sequence_end_times,
    split_batches,
)


def matrix(values):
    values = np.asarray(values, dtype=float)
    return NumericMatrix(values=values, columns=tuple(f"c{i}" for i in range(values.shape[1])))


class TestNormalize:
    def test_forced_column(self):
        out, _ = normalize(matrix([[1.0], [2.0], [3.0]]))
        assert np.allclose(out.values[:, 0], [0.0, 0.5, 1.0])

    def test_constant_column_maps_to_zero(self):
        out, _ = normalize(matrix([[7.0], [7.0], [7.0]]))
        assert (out.values == 0.0).all()

    def test_random_matrices_attain_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            m = matrix(rng.normal(0, 10, (100, 5)))
            out, _ = normalize(m)
            assert out.values.min() >= 0.0 and out.values.max() <= 1.0
            assert np.allclose(out.values.min(axis=0), 0.0)
            assert np.allclose(out.values.max(axis=0), 1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            normalize(matrix(np.empty((0, 2))))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            normalize(matrix([[1.0, np.nan], [2.0, 3.0]]))

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        m = matrix(rng.normal(3, 7, (50, 4)))
        out, stats = normalize(m)
        recovered = stats.invert(out.values)
        assert np.abs((recovered - m.values) / m.values).max() < 1e-12

    def test_stats_reusable_on_new_data(self):
        m = matrix([[0.0], [10.0]])
        _, stats = normalize(m)
        applied = stats.apply(np.array([[5.0], [20.0]]))
        # values past the fitted range clip onto the trained [0, 1] manifold
        assert np.allclose(applied[:, 0], [0.5, 1.0])


class TestMakeSequences:
    def test_window_count(self):
        m = matrix(np.arange(20).reshape(10, 2))
        s = make_sequences(m, np.zeros(10), window=4)
        assert len(s) == 7
        assert s.x.shape == (7, 4, 2)

    def test_short_input_empty(self):
        m = matrix(np.arange(6).reshape(3, 2))
        s = make_sequences(m, np.zeros(3), window=4)
        assert len(s) == 0

    def test_target_is_last_step_label(self):
        m = matrix(np.zeros((6, 1)))
        labels = [0, 0, 0, 1, 0, 1]
        s = make_sequences(m, labels, window=4)
        assert list(s.y) == [1, 0, 1]

    def test_every_row_covered(self):
        rows, window = 10, 4
        m = matrix(np.arange(rows)[:, None].astype(float))
        s = make_sequences(m, np.zeros(rows), window=window)
        covered = set()
        for i in range(len(s)):
            covered.update(s.x[i, :, 0].astype(int).tolist())
        assert covered == set(range(rows))

    def test_stride(self):
        m = matrix(np.arange(10)[:, None].astype(float))
        s = make_sequences(m, np.zeros(10), window=4, stride=2)
        assert len(s) == 4
        assert s.x[1, 0, 0] == 2.0

    def test_end_times(self):
        times = sequence_end_times(10, 4, offset=100)
        assert list(times) == [103, 104, 105, 106, 107, 108, 109]
        assert len(sequence_end_times(3, 4)) == 0


class TestSplitBatches:
    def sequences(self, n=7):
        x = np.arange(n * 4 * 2, dtype=float).reshape(n, 4, 2)
        return SequenceSet(x=x, y=np.arange(n, dtype=np.int64))

    def test_sizes(self):
        batches = split_batches(self.sequences(7), 3, epoch_seed=1)
        assert [len(b) for b in batches] == [3, 3, 1]

    def test_single_batch_when_large(self):
        batches = split_batches(self.sequences(5), 100, epoch_seed=1)
        assert len(batches) == 1 and len(batches[0]) == 5

    def test_deterministic(self):
        a = split_batches(self.sequences(), 3, epoch_seed=9)
        b = split_batches(self.sequences(), 3, epoch_seed=9)
        for ba, bb in zip(a, b):
            assert np.array_equal(ba.y, bb.y)

    def test_partition_no_loss_no_duplicates(self):
        s = self.sequences(11)
        batches = split_batches(s, 4, epoch_seed=3)
        seen = np.concatenate([b.y for b in batches])
        assert sorted(seen.tolist()) == list(range(11))

    def test_zero_batch_size_rejected(self):
        with pytest.raises(ValueError):
            split_batches(self.sequences(), 0, epoch_seed=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=12),
       st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_batches_always_partition(n, batch_size, seed):
    x = np.zeros((n, 2, 1))
    s = SequenceSet(x=x, y=np.arange(n, dtype=np.int64))
    batches = split_batches(s, batch_size, epoch_seed=seed)
    seen = sorted(np.concatenate([b.y for b in batches]).tolist())
    assert seen == list(range(n))
    assert all(len(b) == batch_size for b in batches[:-1])

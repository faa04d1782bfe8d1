"""Preprocessing: normalization, sliding windows, and minibatch splitting.

The pipeline turns a fused numeric dataset into the supervised sequence sets
the classifier consumes: per-column min-max scaling to [0, 1] (stats are kept
so the same affine map can be reused on held-out data), fixed-stride sliding
windows whose target is the label of the window's last step, and a seeded
shuffle-then-chunk minibatch split.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class NumericMatrix:
    """Rectangular all-finite feature matrix with named columns."""

    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("matrix must be 2-D")
        if self.values.shape[1] != len(self.columns):
            raise ValueError("column names must match matrix width")

    @property
    def rows(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class NormStats:
    """Per-column (min, max) fitted on training data, reusable on test data."""

    columns: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        # Clipping keeps unseen extremes on the [0, 1] manifold the model was
        # trained on; on the fitted data itself the clip is a no-op.
        span = self.maxs - self.mins
        safe = np.where(span == 0.0, 1.0, span)
        out = (values - self.mins) / safe
        out[:, span == 0.0] = 0.0
        return np.clip(out, 0.0, 1.0)

    def invert(self, values: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        return values * span + self.mins


@dataclass(frozen=True)
class SequenceSet:
    """Supervised windows: x is (count, window, features), y is (count,) 0/1."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have the same length")

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def normalize(m: NumericMatrix) -> tuple[NumericMatrix, NormStats]:
    """Min-max scale each column to [0, 1]; constant columns map to all zeros."""
    if m.rows == 0:
        raise ValueError("cannot normalize an empty matrix")
    if not np.isfinite(m.values).all():
        raise ValueError("matrix contains non-finite values")
    mins = m.values.min(axis=0)
    maxs = m.values.max(axis=0)
    stats = NormStats(columns=m.columns, mins=mins, maxs=maxs)
    return NumericMatrix(values=stats.apply(m.values), columns=m.columns), stats


def make_sequences(m: NumericMatrix, labels: Sequence[int] | np.ndarray,
                   window: int, stride: int = 1) -> SequenceSet:
    """Slide fixed-length windows over the rows; target = last step's label.

    Input shorter than the window yields an empty set rather than an error.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    labels = np.asarray(labels)
    if len(labels) != m.rows:
        raise ValueError("labels must align with matrix rows")
    if m.rows < window:
        return SequenceSet(x=np.empty((0, window, len(m.columns))),
                           y=np.empty(0, dtype=np.int64))
    starts = np.arange(0, m.rows - window + 1, stride)
    x = np.stack([m.values[s:s + window] for s in starts])
    y = labels[starts + window - 1].astype(np.int64)
    return SequenceSet(x=x, y=y)


def sequence_end_times(n_rows: int, window: int, stride: int = 1,
                       offset: int = 0) -> np.ndarray:
    """Absolute time of each window's last row, for rows starting at ``offset``."""
    if n_rows < window:
        return np.empty(0, dtype=np.int64)
    starts = np.arange(0, n_rows - window + 1, stride)
    return offset + starts + window - 1


def split_batches(s: SequenceSet, batch_size: int, epoch_seed: int) -> list[Batch]:
    """Seeded shuffle then contiguous chunks; the last batch may be smaller."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(len(s))
    return [Batch(x=s.x[order[i:i + batch_size]], y=s.y[order[i:i + batch_size]])
            for i in range(0, len(s), batch_size)]

"""Sparse merchant-affinity vectors and their embedding aggregation.

An affinity vector counts the customers a merchant shares with each member
of an ordered list of known merchants.  The encoder path is: keep the
largest ``kbar`` counts, L1-normalize, then take the weighted sum of the
corresponding embedding rows.  Gradients reach only the touched rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .autodiff import Tensor, _node
from .errors import DimensionError, UsageError


@dataclass(frozen=True)
class AffinityVector:
    """Sparse nonnegative integer vector of shared-customer counts.

    ``indices`` are strictly increasing positions in [0, length); ``counts``
    are positive int64 (L1 norms in the wild overflow 32 bits).
    """

    length: int
    indices: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        cnt = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "counts", cnt)
        if idx.shape != cnt.shape or idx.ndim != 1:
            raise DimensionError("indices and counts must be 1-D and aligned")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.length:
                raise DimensionError(
                    f"index out of range for vector of length {self.length}"
                )
            if np.any(np.diff(idx) <= 0):
                raise UsageError("indices must be strictly increasing")
            if np.any(cnt <= 0):
                raise UsageError("stored counts must be positive")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.length, dtype=np.int64)
        dense[self.indices] = self.counts
        return dense

    @classmethod
    def from_dense(cls, values) -> "AffinityVector":
        values = np.asarray(values, dtype=np.int64)
        idx = np.nonzero(values)[0]
        return cls(length=values.size, indices=idx, counts=values[idx])

    def __eq__(self, other):
        return (
            isinstance(other, AffinityVector)
            and self.length == other.length
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.counts, other.counts)
        )


@dataclass(frozen=True)
class SparseFloatVector:
    """Sparse float vector produced by normalization."""

    length: int
    indices: np.ndarray
    values: np.ndarray

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.length)
        dense[self.indices] = self.values
        return dense


def topk_truncate(v: AffinityVector, kbar: int) -> AffinityVector:
    """Keep the ``kbar`` largest counts (boundary ties go to smaller indices).

    Vectors with at most ``kbar`` nonzeros pass through unchanged.
    """
    if kbar < 1:
        raise UsageError("kbar must be at least 1")
    if v.nnz <= kbar:
        return v
    order = np.lexsort((v.indices, -v.counts))[:kbar]
    keep = np.sort(v.indices[order])
    dense_pos = np.searchsorted(v.indices, keep)
    return AffinityVector(length=v.length, indices=keep, counts=v.counts[dense_pos])


def l1_normalize(v: AffinityVector) -> SparseFloatVector:
    """Divide entries by their sum; the all-zero vector stays all-zero."""
    total = int(v.counts.sum())
    if total == 0:
        return SparseFloatVector(v.length, v.indices.copy(), np.zeros(0))
    return SparseFloatVector(
        v.length, v.indices.copy(), v.counts.astype(np.float64) / total
    )


def aggregate_batch(
    table: Tensor, batch: Sequence[Tuple[np.ndarray, np.ndarray]]
) -> Tensor:
    """Weighted sums of embedding rows: one (indices, weights) pair per sample.

    Returns a (B, dim) tensor.  The backward pass writes gradient only into
    the rows named by the indices; untouched rows stay exactly zero.
    """
    k, dim = table.data.shape
    out = np.zeros((len(batch), dim))
    for row, (idx, w) in enumerate(batch):
        if idx.size == 0:
            continue
        if idx.max() >= k or idx.min() < 0:
            raise DimensionError(
                f"embedding index out of range for table with {k} rows"
            )
        out[row] = w @ table.data[idx]

    def _bw(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            for row, (idx, w) in enumerate(batch):
                if idx.size:
                    # indices are unique per sample, so fancy-index add is safe
                    gt[idx] += np.outer(w, g[row])
            table._accumulate(gt)

    return _node(out, (table,), _bw)


def aggregate(v: SparseFloatVector, table: Tensor) -> Tensor:
    """Single-vector form of :func:`aggregate_batch`, returning (dim,)."""
    if v.length != table.data.shape[0]:
        raise DimensionError(
            f"vector length {v.length} != table rows {table.data.shape[0]}"
        )
    out = aggregate_batch(table, [(v.indices, v.values)])
    from .autodiff import reshape

    return reshape(out, (table.data.shape[1],))


def affinity_encode(v: AffinityVector, table: Tensor, kbar: int) -> Tensor:
    """Truncate, normalize, and aggregate in one call."""
    return aggregate(l1_normalize(topk_truncate(v, kbar)), table)

"""Dense float64 kernel: matrix products and masked row-softmax.

Matrices are 2-D C-contiguous ``numpy.float64`` arrays throughout the
package. Values are finite except for negative-infinity sentinels, which
are only legal inside pre-softmax score matrices at masked positions.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray

_NEG_INF = float("-inf")


def as_matrix(values) -> Matrix:
    """Coerce nested sequences to a 2-D float64 matrix."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"shape mismatch for matmul: ({a.shape[0]}x{a.shape[1]}) @ ({b.shape[0]}x{b.shape[1]})"
        )
    return a @ b


def masked_row_softmax(scores: Matrix, mask: np.ndarray) -> Matrix:
    """Row-wise softmax over the allowed entries of ``scores``.

    Masked entries come out exactly 0 and each row sums to 1. Rows are
    stabilized by subtracting the per-row maximum over allowed entries.
    Disallowed score values are never read, so garbage (including -inf
    sentinels) at masked positions cannot leak into the result.

    Raises:
        ValueError: on shape mismatch or a fully masked row.
    """
    scores = as_matrix(scores)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ValueError(f"mask shape {mask.shape} != scores shape {scores.shape}")
    if not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ValueError(f"fully masked row {bad}: every row must allow at least one entry")

    s = np.where(mask, scores, _NEG_INF)
    row_max = s.max(axis=1, keepdims=True)
    if not np.isfinite(row_max).all():
        bad = int(np.flatnonzero(~np.isfinite(row_max.ravel()))[0])
        raise ValueError(f"row {bad} has no finite allowed score")
    e = np.exp(s - row_max)
    out = e / e.sum(axis=1, keepdims=True)
    return out

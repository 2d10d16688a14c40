"""Deterministic numeric primitives: stable softmax and stable top-k.

Everything here runs in float32 with exact float comparisons so that
tie-breaking is well defined and results are identical across runs.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyVectorError

__all__ = ["softmax", "stable_top_k"]


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax over a 1-D vector of logits.

    Stabilized by max-subtraction; the result is float32, non-negative,
    and sums to 1 within 1e-5.
    """
    x = np.asarray(logits, dtype=np.float32)
    if x.size == 0:
        raise EmptyVectorError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise EmptyVectorError("softmax input must be finite")
    shifted = x - np.max(x)
    e = np.exp(shifted)
    return e / e.sum(dtype=np.float32)


def stable_top_k(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken toward the lower index.

    Returns min(k, len(scores)) indices sorted ascending. Comparisons use
    exact float ordering, so equal float32 values always resolve to the
    earlier slot.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    s = np.asarray(scores, dtype=np.float32)
    if s.ndim != 1:
        raise ValueError("scores must be one-dimensional")
    take = min(k, s.size)
    if take == 0:
        return np.empty(0, dtype=np.int64)
    # Stable argsort of the negated scores puts equal scores in original
    # (ascending index) order, which is exactly the tie rule.
    order = np.argsort(-s, kind="stable")
    picked = order[:take]
    picked.sort()
    return picked.astype(np.int64)

"""Importance scoring and retention selection.

Scores are derived from the attention trace of the current forward pass.
Each query row is restricted to the cache columns and renormalized to sum
to one, which equals a softmax taken over cache keys only; rows are then
head-averaged. The ``raw_rows`` switch keeps the full-row probabilities
instead (no renormalization) for sensitivity experiments.

Strategies:

* chunk-average: mean renormalized attention over all chunk tokens
* last-token: the final chunk token's row only
* accumulative: running sum of attention each surviving slot has received
* mean+stddev: chunk-average plus a per-slot stddev diagnostic across
  query rows (retention still keeps a fixed k)
* sink+window: positional retention that ignores attention entirely

Eviction is layer-wise: each layer selects independently, so retained
origin sets may differ across layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyCacheError
from .numerics import stable_top_k

SCORED_POLICIES = ("cse", "tova", "h2o", "roco")


@dataclass
class PolicyKind:
    kind: str
    sink_size: int = 0
    window: int = 0


def _cache_rows(trace, layer: int, cache_len: int, raw_rows: bool) -> np.ndarray:
    """Head-averaged per-query attention over the cache columns, (Q, cache_len)."""
    if cache_len == 0:
        raise EmptyCacheError("cannot score an empty cache")
    probs = trace.probs[layer]
    if probs.shape[-1] < cache_len:
        raise ValueError(
            f"trace has {probs.shape[-1]} key columns but cache_len is {cache_len}"
        )
    if probs.shape[1] < 1:
        raise ValueError("trace has no query rows")
    block = probs[:, :, :cache_len].astype(np.float32)  # (H, Q, C)
    if not raw_rows:
        block = block / block.sum(axis=-1, keepdims=True)
    return block.mean(axis=0)


def imp_chunk_avg(trace, layer: int, cache_len: int, *, raw_rows: bool = False) -> np.ndarray:
    """Chunk-averaged importance of every cache slot."""
    return _cache_rows(trace, layer, cache_len, raw_rows).mean(axis=0).astype(np.float32)


def imp_last_token(trace, layer: int, cache_len: int, *, raw_rows: bool = False) -> np.ndarray:
    """Importance from the final query row only."""
    return _cache_rows(trace, layer, cache_len, raw_rows)[-1].astype(np.float32)


def imp_accumulative(cache, trace, layer: int, *, raw_rows: bool = False) -> np.ndarray:
    """Add this chunk's attention into the per-slot accumulators.

    Contribution per slot is the sum over all query rows of head-averaged
    (renormalized) attention. Freshly appended slots start at zero; evicted
    slots drop their history with the slot.
    """
    cache_len = cache.slot_count(layer)
    if cache_len:
        n_queries = trace.probs[layer].shape[1]
        if n_queries:
            contrib = _cache_rows(trace, layer, cache_len, raw_rows).sum(axis=0)
            cache.acc_scores[layer] = (cache.acc_scores[layer] + contrib).astype(np.float32)
    return cache.acc_scores[layer].copy()


def imp_roco(trace, layer: int, cache_len: int, *, raw_rows: bool = False):
    """Mean importance plus per-slot stddev across query rows.

    The stddev (population) is a diagnostic only; selection still keeps a
    fixed k slots by the mean score.
    """
    rows = _cache_rows(trace, layer, cache_len, raw_rows)
    mean = rows.mean(axis=0).astype(np.float32)
    std = rows.std(axis=0).astype(np.float32)
    return mean, std


def score_lm_cache(kind: str, cache, trace, layer: int, cache_len: int,
                   *, raw_rows: bool = False) -> np.ndarray:
    """Dispatch the language-model cache scorer for a scored policy."""
    if kind == "cse":
        return imp_chunk_avg(trace, layer, cache_len, raw_rows=raw_rows)
    if kind == "tova":
        return imp_last_token(trace, layer, cache_len, raw_rows=raw_rows)
    if kind == "h2o":
        return imp_accumulative(cache, trace, layer, raw_rows=raw_rows)
    if kind == "roco":
        return imp_roco(trace, layer, cache_len, raw_rows=raw_rows)[0]
    raise ConfigError(f"policy {kind!r} has no attention scorer")


def retention_streaming(origins, sink_size: int, window: int) -> list:
    """Sink + sliding window retention, ignoring attention entirely.

    Keeps slots whose origin is among the globally first ``sink_size``
    document tokens, plus the last ``window`` slots of each layer.
    """
    if sink_size < 0 or window < 0:
        raise ValueError("sink_size and window must be non-negative")
    retained = []
    for layer_origins in origins:
        layer_origins = np.asarray(layer_origins)
        n = layer_origins.size
        keep = np.zeros(n, dtype=bool)
        keep[layer_origins < sink_size] = True
        if window:
            keep[max(0, n - window):] = True
        retained.append(np.flatnonzero(keep).astype(np.int64).tolist())
    return retained


def select_retained(scores, k: int, pinned=None) -> list:
    """Per-layer top-k slot selection with pinned slots always included.

    ``pinned`` holds per-layer slot indices (attention sinks) that survive
    regardless of score; the remaining budget is filled by the highest
    scores with ties broken toward the lower slot index. Output is sorted
    ascending per layer.
    """
    if pinned is None:
        pinned = [() for _ in scores]
    retained = []
    for layer_scores, layer_pins in zip(scores, pinned):
        layer_scores = np.asarray(layer_scores, dtype=np.float32)
        n = layer_scores.size
        pins = np.unique(np.asarray(list(layer_pins), dtype=np.int64)) if len(layer_pins) else np.empty(0, dtype=np.int64)
        if pins.size and (pins[0] < 0 or pins[-1] >= n):
            raise IndexError("pinned slot index out of range")
        if pins.size > k:
            raise ConfigError(f"budget k={k} smaller than {pins.size} pinned slots")
        free = np.setdiff1d(np.arange(n, dtype=np.int64), pins, assume_unique=False)
        top = stable_top_k(layer_scores[free], k - pins.size)
        keep = np.union1d(pins, free[top])
        retained.append(keep.astype(np.int64).tolist())
    return retained

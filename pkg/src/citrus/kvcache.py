"""Layered key-value cache: append, retention, positions, budget accounting.

Each layer owns its own slot list, so different layers may retain different
origins (layer-wise eviction). Origins record the absolute source-document
index every slot came from; they are the observable that retention tests
assert on. The per-slot accumulator is used only by the accumulative-score
policy and rides along with the slot it belongs to.
"""

from __future__ import annotations

import base64

import numpy as np

from .config import RunConfig
from .errors import BudgetViolation, OriginError
from .model import CacheView

PHASES = ("post-evict", "post-append", "post-finalize")


class LayeredKVCache:
    """Single-owner mutable KV store for one experiment run."""

    def __init__(self, n_layers: int):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.n_layers = n_layers
        self.keys = [None] * n_layers        # (n_heads, n_slots, kv_dim)
        self.values = [None] * n_layers
        self.origins = [np.empty(0, dtype=np.int64) for _ in range(n_layers)]
        self.acc_scores = [np.empty(0, dtype=np.float32) for _ in range(n_layers)]

    def slot_count(self, layer: int = 0) -> int:
        k = self.keys[layer]
        return 0 if k is None else k.shape[1]

    def slot_counts(self) -> list[int]:
        return [self.slot_count(l) for l in range(self.n_layers)]

    def append_states(self, new_kv, origins) -> None:
        """Append one chunk's KV states at the tail of every layer.

        ``new_kv`` is a per-layer list of (keys, values) arrays shaped
        (n_heads, chunk_len, kv_dim); ``origins`` are the chunk tokens'
        absolute document indices, which must extend every layer's
        existing origins in strictly increasing order.
        """
        origins = np.asarray(origins, dtype=np.int64)
        if len(new_kv) != self.n_layers:
            raise ValueError(f"expected KV for {self.n_layers} layers, got {len(new_kv)}")
        if origins.size != new_kv[0][0].shape[1]:
            raise OriginError(
                f"{origins.size} origins for {new_kv[0][0].shape[1]} appended states"
            )
        if origins.size > 1 and not np.all(np.diff(origins) > 0):
            raise OriginError("appended origins must be strictly increasing")
        zeros = np.zeros(origins.size, dtype=np.float32)
        for l in range(self.n_layers):
            k_new, v_new = new_kv[l]
            if self.origins[l].size and origins.size and origins[0] <= self.origins[l][-1]:
                raise OriginError(
                    f"layer {l}: origin {int(origins[0])} not greater than "
                    f"existing {int(self.origins[l][-1])}"
                )
            if self.keys[l] is None:
                self.keys[l] = k_new.astype(np.float32, copy=True)
                self.values[l] = v_new.astype(np.float32, copy=True)
            else:
                self.keys[l] = np.concatenate([self.keys[l], k_new], axis=1)
                self.values[l] = np.concatenate([self.values[l], v_new], axis=1)
            self.origins[l] = np.concatenate([self.origins[l], origins])
            self.acc_scores[l] = np.concatenate([self.acc_scores[l], zeros])

    def apply_retention(self, retained) -> None:
        """Keep exactly the given slot indices per layer, in original order."""
        if len(retained) != self.n_layers:
            raise ValueError(f"expected retention sets for {self.n_layers} layers")
        for l in range(self.n_layers):
            idx = np.unique(np.asarray(retained[l], dtype=np.int64))
            n = self.slot_count(l)
            if idx.size and (idx[0] < 0 or idx[-1] >= n):
                raise IndexError(
                    f"layer {l}: retained index out of range for {n} slots"
                )
            self.keys[l] = self.keys[l][:, idx, :]
            self.values[l] = self.values[l][:, idx, :]
            self.origins[l] = self.origins[l][idx]
            self.acc_scores[l] = self.acc_scores[l][idx]

    def view(self) -> CacheView:
        return CacheView(keys=self.keys, values=self.values, origins=self.origins)

    def snapshot(self, include_kv: bool = False) -> dict:
        """JSON-serializable dump: per-layer origins, optionally base64 KV."""
        layers = []
        for l in range(self.n_layers):
            entry = {"origins": self.origins[l].tolist()}
            if include_kv and self.keys[l] is not None:
                entry["shape"] = list(self.keys[l].shape)
                entry["dtype"] = "<f4"
                entry["keys_b64"] = base64.b64encode(
                    np.ascontiguousarray(self.keys[l], dtype="<f4").tobytes()
                ).decode("ascii")
                entry["values_b64"] = base64.b64encode(
                    np.ascontiguousarray(self.values[l], dtype="<f4").tobytes()
                ).decode("ascii")
            layers.append(entry)
        return {"layers": layers}


def assign_positions(cache_len: int, incoming_len: int):
    """Position shift: the cache always occupies 0..cache_len-1.

    Incoming tokens continue the range, regardless of evictions or the
    true document offsets of whatever the cache currently holds.
    """
    if cache_len < 0 or incoming_len < 0:
        raise ValueError("lengths must be non-negative")
    cache_pos = np.arange(cache_len, dtype=np.int64)
    incoming_pos = np.arange(cache_len, cache_len + incoming_len, dtype=np.int64)
    return cache_pos, incoming_pos


def budget_check(
    layout: str,
    phase: str,
    caches: dict,
    config: RunConfig,
    tokens_seen: int | None = None,
) -> dict:
    """Assert per-layer slot counts against the phase budget.

    post-evict: <= k per cache; post-append: <= k + l_s per cache;
    post-finalize: exactly min(k, tokens_seen) in every cache. The
    individual layout additionally bounds the combined total at
    2 * (l_s + k) after an append.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    k, l_s = config.k, config.l_s
    report = {"layout": layout, "phase": phase, "caches": {}, "ok": True}

    if phase == "post-evict":
        limit = k
    elif phase == "post-append":
        limit = k + l_s
    else:
        if tokens_seen is None:
            raise ValueError("post-finalize check needs tokens_seen")
        limit = min(k, tokens_seen)

    for name, cache in caches.items():
        counts = cache.slot_counts()
        report["caches"][name] = counts
        for layer, n in enumerate(counts):
            if phase == "post-finalize":
                bad = n != limit
            else:
                bad = n > limit
            if bad:
                raise BudgetViolation(
                    f"{phase}: cache {name!r} layer {layer} holds {n} slots "
                    f"(limit {limit})",
                    layer=layer,
                    cache=name,
                    phase=phase,
                )

    if layout == "individual" and phase == "post-append":
        total_limit = 2 * (l_s + k)
        for layer in range(next(iter(caches.values())).n_layers):
            total = sum(c.slot_count(layer) for c in caches.values())
            if total > total_limit:
                raise BudgetViolation(
                    f"post-append: combined caches hold {total} slots at layer "
                    f"{layer} (limit {total_limit})",
                    layer=layer,
                    cache="combined",
                    phase=phase,
                )
        report["combined_limit"] = total_limit
    report["limit"] = limit
    return report

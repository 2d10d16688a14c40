"""Attention backends: a seeded tiny transformer and a programmable-affinity mock.

Both backends expose the same forward interface: encode a chunk of tokens
against a read-only view of cached key/value states, and return logits, the
chunk's new KV states, and the full per-layer per-head attention trace.

The tiny transformer is a pre-norm decoder stack with rotary positions
applied to Q/K at attention time. Keys are stored in the cache *unrotated*
so that the caller can re-assign positions freely (position shift); the
rotation uses whatever positions are passed to :func:`forward_chunk`.

The affinity mock computes attention logits purely from token identities
via a ``vocab x vocab`` table, identically in every layer and head. Its
key/value states are one-hot token embeddings, so output logits read back
which token identities the model attended to.

Weight file container (little-endian):

    magic  b"CTRS"
    u32    format version (1)
    u32    n_layers, n_heads, d_model, d_head, vocab_size, max_positions
    u32    backend tag: 0 = tiny-transformer, 1 = affinity-mock
    i64    seed
    f32[]  tensors, row-major, in this order:
           tiny-transformer: embedding [vocab, d_model]; then per layer
           attn_norm [d_model], wq, wk, wv, wo [d_model, d_model],
           ffn_norm [d_model], w_up [d_model, 4*d_model],
           w_down [4*d_model, d_model]; finally final_norm [d_model]
           affinity-mock: affinity [vocab, vocab]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BackendError, ConfigError, LengthError, ShapeError, VocabError

MAGIC = b"CTRS"
FORMAT_VERSION = 1

BACKEND_TINY = "tiny-transformer"
BACKEND_MOCK = "affinity-mock"
_BACKEND_TAGS = {BACKEND_TINY: 0, BACKEND_MOCK: 1}
_TAG_BACKENDS = {v: k for k, v in _BACKEND_TAGS.items()}

_FFN_MULT = 4
_ROPE_THETA = 10000.0
_NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    max_positions: int = 65536
    backend: str = BACKEND_TINY
    seed: int = 0

    def __post_init__(self):
        if self.backend not in _BACKEND_TAGS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.n_heads < 1:
            raise ConfigError("n_heads must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model must equal n_heads * d_head "
                f"({self.d_model} != {self.n_heads} * {self.d_head})"
            )
        if self.backend == BACKEND_TINY and self.d_head % 2 != 0:
            raise ConfigError("d_head must be even for rotary positions")
        if self.max_positions < 1:
            raise ConfigError("max_positions must be >= 1")


@dataclass
class ModelWeights:
    """Parameters for either backend; unused fields stay None."""

    config: ModelConfig
    embedding: np.ndarray | None = None
    attn_norm: list = field(default_factory=list)
    wq: list = field(default_factory=list)
    wk: list = field(default_factory=list)
    wv: list = field(default_factory=list)
    wo: list = field(default_factory=list)
    ffn_norm: list = field(default_factory=list)
    w_up: list = field(default_factory=list)
    w_down: list = field(default_factory=list)
    final_norm: np.ndarray | None = None
    affinity: np.ndarray | None = None

    @property
    def kv_dim(self) -> int:
        """Trailing dimension of the per-head KV states this model emits."""
        if self.config.backend == BACKEND_MOCK:
            return self.config.vocab_size
        return self.config.d_head


@dataclass
class CacheView:
    """Read-only borrow of per-layer KV slabs, plus origin labels."""

    keys: list  # per layer: (n_heads, n_slots, kv_dim) or None when empty
    values: list
    origins: list | None = None  # per layer: (n_slots,) absolute doc indices

    def slot_count(self, layer: int = 0) -> int:
        k = self.keys[layer]
        return 0 if k is None else k.shape[1]


@dataclass
class AttentionTrace:
    """Attention probabilities from each chunk token to each visible key.

    ``probs[l]`` has shape (n_heads, n_queries, n_keys) with cache slots
    occupying the first ``cache_len`` columns and intra-chunk causal keys
    the rest. ``key_origins[l]`` labels every column with its absolute
    source-document index when origins were supplied.
    """

    cache_len: int
    probs: list
    key_origins: list | None = None


@dataclass
class StepOutput:
    logits: np.ndarray  # (n_queries, vocab_size) float32
    new_kv: list        # per layer: (keys, values), each (n_heads, n_queries, kv_dim)
    trace: AttentionTrace


def init_model(config: ModelConfig) -> ModelWeights:
    """Fill weights deterministically from the config's seed."""
    rng = np.random.default_rng(config.seed)
    if config.backend == BACKEND_MOCK:
        table = np.zeros((config.vocab_size, config.vocab_size), dtype=np.float32)
        return ModelWeights(config=config, affinity=table)

    std = 0.02 / np.sqrt(config.n_layers)

    def normal(*shape):
        return rng.normal(0.0, std, size=shape).astype(np.float32)

    w = ModelWeights(config=config)
    w.embedding = normal(config.vocab_size, config.d_model)
    for _ in range(config.n_layers):
        w.attn_norm.append(np.ones(config.d_model, dtype=np.float32))
        w.wq.append(normal(config.d_model, config.d_model))
        w.wk.append(normal(config.d_model, config.d_model))
        w.wv.append(normal(config.d_model, config.d_model))
        w.wo.append(normal(config.d_model, config.d_model))
        w.ffn_norm.append(np.ones(config.d_model, dtype=np.float32))
        w.w_up.append(normal(config.d_model, _FFN_MULT * config.d_model))
        w.w_down.append(normal(_FFN_MULT * config.d_model, config.d_model))
    w.final_norm = np.ones(config.d_model, dtype=np.float32)
    return w


def set_affinity(weights: ModelWeights, q_token: int, k_token: int, logit: float) -> ModelWeights:
    """Set the attention logit the mock assigns from query token to key token."""
    if weights.config.backend != BACKEND_MOCK:
        raise BackendError("set_affinity requires the affinity-mock backend")
    vocab = weights.config.vocab_size
    if not (0 <= q_token < vocab and 0 <= k_token < vocab):
        raise VocabError(f"token pair ({q_token}, {k_token}) outside vocab of {vocab}")
    weights.affinity[q_token, k_token] = np.float32(logit)
    return weights


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + _NORM_EPS)
    return (x * scale * gain).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(0.7978845608028654)  # sqrt(2/pi)
    return (0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x * x * x)))).astype(np.float32)


def _rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate pairs of head dims by position-dependent angles.

    x: (..., n, d_head) with d_head even; positions: (n,).
    """
    d = x.shape[-1]
    inv = _ROPE_THETA ** (-np.arange(0, d, 2, dtype=np.float32) / np.float32(d))
    ang = positions.astype(np.float32)[:, None] * inv[None, :]  # (n, d/2)
    cos = np.cos(ang)
    sin = np.sin(ang)
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _check_forward_inputs(weights, cache, chunk_tokens, cache_positions, chunk_positions):
    cfg = weights.config
    n_c = 0 if cache is None else cache.slot_count()
    m = chunk_tokens.shape[0]
    if cache_positions.shape[0] != n_c:
        raise ShapeError(f"{cache_positions.shape[0]} cache positions for {n_c} cache slots")
    if chunk_positions.shape[0] != m:
        raise ShapeError(f"{chunk_positions.shape[0]} chunk positions for {m} chunk tokens")
    all_pos = np.concatenate([cache_positions, chunk_positions])
    if all_pos.size > 1 and not np.all(np.diff(all_pos) > 0):
        raise ShapeError("positions must be strictly increasing across cache and chunk")
    if all_pos.size and int(all_pos[-1]) >= cfg.max_positions:
        raise LengthError(
            f"position {int(all_pos[-1])} exceeds max_positions {cfg.max_positions}"
        )
    if m and (chunk_tokens.min() < 0 or chunk_tokens.max() >= cfg.vocab_size):
        raise VocabError("chunk token id outside vocabulary")
    return n_c, m


def _causal_mask_cols(n_c: int, m: int) -> np.ndarray:
    """Boolean (m, n_c + m) mask, True where the key is masked."""
    cols = np.arange(n_c + m)
    rows = np.arange(m)
    return cols[None, :] > (n_c + rows[:, None])


def _masked_softmax(scores: np.ndarray, masked: np.ndarray) -> np.ndarray:
    scores = scores.copy()
    scores[..., masked] = -np.inf
    peak = np.max(scores, axis=-1, keepdims=True)
    e = np.exp(scores - peak)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def _trace_origins(cache, chunk_origins, n_layers: int) -> list | None:
    if cache is None or cache.origins is None or chunk_origins is None:
        return None
    chunk_origins = np.asarray(chunk_origins, dtype=np.int64)
    return [np.concatenate([cache.origins[l], chunk_origins]) for l in range(n_layers)]


def _forward_tiny(weights, cache, chunk_tokens, cache_positions, chunk_positions):
    cfg = weights.config
    n_c = 0 if cache is None else cache.slot_count()
    m = chunk_tokens.shape[0]
    H, dh = cfg.n_heads, cfg.d_head
    masked = _causal_mask_cols(n_c, m)
    inv_sqrt = np.float32(1.0 / np.sqrt(dh))

    x = weights.embedding[chunk_tokens]  # (m, d_model)
    probs_per_layer = []
    new_kv = []
    for l in range(cfg.n_layers):
        h = _rmsnorm(x, weights.attn_norm[l])
        q = (h @ weights.wq[l]).reshape(m, H, dh).transpose(1, 0, 2)
        k_new = (h @ weights.wk[l]).reshape(m, H, dh).transpose(1, 0, 2)
        v_new = (h @ weights.wv[l]).reshape(m, H, dh).transpose(1, 0, 2)

        q_rot = _rope(q, chunk_positions)
        k_chunk_rot = _rope(k_new, chunk_positions)
        if n_c:
            k_cache_rot = _rope(cache.keys[l], cache_positions)
            k_all = np.concatenate([k_cache_rot, k_chunk_rot], axis=1)
            v_all = np.concatenate([cache.values[l], v_new], axis=1)
        else:
            k_all = k_chunk_rot
            v_all = v_new

        scores = np.matmul(q_rot, k_all.transpose(0, 2, 1)) * inv_sqrt  # (H, m, n_keys)
        probs = _masked_softmax(scores, masked)
        probs_per_layer.append(probs)

        ctx = np.matmul(probs, v_all)  # (H, m, dh)
        attn_out = ctx.transpose(1, 0, 2).reshape(m, cfg.d_model) @ weights.wo[l]
        x = (x + attn_out).astype(np.float32)

        h2 = _rmsnorm(x, weights.ffn_norm[l])
        x = (x + _gelu(h2 @ weights.w_up[l]) @ weights.w_down[l]).astype(np.float32)

        new_kv.append((k_new.astype(np.float32), v_new.astype(np.float32)))

    logits = (_rmsnorm(x, weights.final_norm) @ weights.embedding.T).astype(np.float32)
    return logits, new_kv, probs_per_layer


def _forward_mock(weights, cache, chunk_tokens, cache_positions, chunk_positions):
    cfg = weights.config
    n_c = 0 if cache is None else cache.slot_count()
    m = chunk_tokens.shape[0]
    H = cfg.n_heads
    masked = _causal_mask_cols(n_c, m)

    onehot_chunk = np.zeros((m, cfg.vocab_size), dtype=np.float32)
    onehot_chunk[np.arange(m), chunk_tokens] = 1.0

    probs_per_layer = []
    new_kv = []
    last_probs = None
    last_key_tokens = None
    for l in range(cfg.n_layers):
        if n_c:
            key_tokens = np.concatenate(
                [np.argmax(cache.keys[l][0], axis=-1), chunk_tokens]
            )
        else:
            key_tokens = chunk_tokens
        scores = weights.affinity[chunk_tokens][:, key_tokens]  # (m, n_keys)
        probs_one = _masked_softmax(scores[None, :, :], masked)[0]
        probs = np.broadcast_to(probs_one, (H, m, n_c + m)).copy()
        probs_per_layer.append(probs)
        last_probs = probs_one
        last_key_tokens = key_tokens

        kv = np.broadcast_to(onehot_chunk, (H, m, cfg.vocab_size)).copy()
        new_kv.append((kv, kv.copy()))

    # One-hot values: logits accumulate attention mass per attended token id.
    key_onehot = np.zeros((last_key_tokens.shape[0], cfg.vocab_size), dtype=np.float32)
    key_onehot[np.arange(last_key_tokens.shape[0]), last_key_tokens] = 1.0
    logits = (last_probs @ key_onehot).astype(np.float32)
    return logits, new_kv, probs_per_layer


def forward_chunk(
    weights: ModelWeights,
    cache: CacheView | None,
    chunk_tokens,
    cache_positions,
    chunk_positions,
    chunk_origins=None,
) -> StepOutput:
    """Encode a chunk against a cache view without mutating the cache.

    Attention runs over (cache slots, then causal intra-chunk keys) at the
    supplied positions. New KV states come back un-positioned so the caller
    can re-assign positions at the next step.
    """
    chunk_tokens = np.asarray(chunk_tokens, dtype=np.int64)
    cache_positions = np.asarray(cache_positions, dtype=np.int64)
    chunk_positions = np.asarray(chunk_positions, dtype=np.int64)
    n_c, _ = _check_forward_inputs(weights, cache, chunk_tokens, cache_positions, chunk_positions)

    if weights.config.backend == BACKEND_MOCK:
        logits, new_kv, probs = _forward_mock(
            weights, cache, chunk_tokens, cache_positions, chunk_positions
        )
    else:
        logits, new_kv, probs = _forward_tiny(
            weights, cache, chunk_tokens, cache_positions, chunk_positions
        )
    trace = AttentionTrace(
        cache_len=n_c,
        probs=probs,
        key_origins=_trace_origins(cache, chunk_origins, weights.config.n_layers),
    )
    return StepOutput(logits=logits, new_kv=new_kv, trace=trace)


def _tensor_list(weights: ModelWeights) -> list:
    cfg = weights.config
    if cfg.backend == BACKEND_MOCK:
        return [weights.affinity]
    out = [weights.embedding]
    for l in range(cfg.n_layers):
        out += [
            weights.attn_norm[l], weights.wq[l], weights.wk[l], weights.wv[l],
            weights.wo[l], weights.ffn_norm[l], weights.w_up[l], weights.w_down[l],
        ]
    out.append(weights.final_norm)
    return out


def save_weights(weights: ModelWeights, path) -> None:
    cfg = weights.config
    header = struct.pack(
        "<4sIIIIIIIq",
        MAGIC,
        FORMAT_VERSION,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_model,
        cfg.d_head,
        cfg.vocab_size,
        cfg.max_positions,
        _BACKEND_TAGS[cfg.backend],
        cfg.seed,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for t in _tensor_list(weights):
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.calcsize("<4sIIIIIIIq")
    magic, version, n_layers, n_heads, d_model, d_head, vocab, max_pos, tag, seed = (
        struct.unpack("<4sIIIIIIIq", blob[:head])
    )
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}; not a weight file")
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported weight format version {version}")
    if tag not in _TAG_BACKENDS:
        raise ConfigError(f"unknown backend tag {tag}")
    cfg = ModelConfig(
        n_layers=n_layers, n_heads=n_heads, d_model=d_model, d_head=d_head,
        vocab_size=vocab, max_positions=max_pos, backend=_TAG_BACKENDS[tag], seed=seed,
    )
    w = init_model(cfg)
    offset = head
    for t in _tensor_list(w):
        n = t.size * 4
        t[...] = np.frombuffer(blob[offset:offset + n], dtype="<f4").reshape(t.shape)
        offset += n
    if offset != len(blob):
        raise ConfigError("weight file size does not match its header")
    return w

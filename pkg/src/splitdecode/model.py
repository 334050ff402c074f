"""A small decoder-only transformer with per-layer KV caching.

The network is deliberately tiny and untrained: RMS pre-normalization,
rotary position encoding applied to Q and K at projection time, SiLU MLP,
separate embedding/unembedding tables. All weights are deterministic
functions of the config seed, so every property under test is reproducible.

Rotary encoding at projection time means cached K rows are already
position-encoded; splitting a cache by position therefore needs no
re-encoding on either side of the split.

Weight file format (save_weights/load_weights): magic bytes ``OSPDW1``,
then the seven config integers (n_layers, n_heads, d_model, head_dim,
vocab_size, max_seq, seed) as little-endian int32, then every tensor in
declared order (embed; per layer: wq, wk, wv, wo, w_in, w_out, gain_attn,
gain_mlp; final_gain; unembed) as row-major little-endian float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimensionError, seeded_matrix, stable_softmax_stats

__all__ = [
    "CacheFullError",
    "ConfigError",
    "FileFormatError",
    "KvCache",
    "LayerWeights",
    "ModelConfig",
    "Weights",
    "attention_reference",
    "decode_step_monolithic",
    "full_forward",
    "greedy_decode",
    "init_model",
    "load_weights",
    "prefill",
    "reset_weight_alloc_count",
    "sample_token",
    "save_weights",
    "weight_alloc_count",
]

WEIGHT_FILE_MAGIC = b"OSPDW1"
ROTARY_BASE = 10000.0
RMS_EPS = 1e-6

# Monotonic count of weight-set instantiations (init + file load); the
# bench harness reads the delta around a run to measure weight copies.
_weight_allocations = 0


class ConfigError(ValueError):
    """Model configuration violates its invariants."""


class CacheFullError(RuntimeError):
    """Decode attempted past max_seq."""


class FileFormatError(ValueError):
    """Weight file is malformed."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    head_dim: int
    vocab_size: int
    max_seq: int
    seed: int

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("n_layers and n_heads must be >= 1")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*head_dim "
                f"({self.n_heads}*{self.head_dim})"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even (rotary pairs dimensions)")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.max_seq < 2:
            raise ConfigError("max_seq must be >= 2")

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.d_model

    @property
    def eos_token(self) -> int:
        # fixed convention: the last vocab entry terminates generation
        return self.vocab_size - 1


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray
    gain_attn: np.ndarray
    gain_mlp: np.ndarray


@dataclass
class Weights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    final_gain: np.ndarray
    unembed: np.ndarray

    def tensors(self):
        """All tensors in the declared (file) order."""
        yield self.embed
        for lw in self.layers:
            yield lw.wq
            yield lw.wk
            yield lw.wv
            yield lw.wo
            yield lw.w_in
            yield lw.w_out
            yield lw.gain_attn
            yield lw.gain_mlp
        yield self.final_gain
        yield self.unembed


def weight_alloc_count() -> int:
    return _weight_allocations


def reset_weight_alloc_count() -> int:
    global _weight_allocations
    previous = _weight_allocations
    _weight_allocations = 0
    return previous


def init_model(config: ModelConfig) -> Weights:
    """Build all weights deterministically from config.seed.

    Per-tensor seeds come from SeedSequence(config.seed).generate_state,
    so distinct tensors never share a stream and two configs with the
    same seed produce byte-identical weights.
    """
    global _weight_allocations
    d, h = config.d_model, config.mlp_hidden
    n_tensors = 2 + 8 * config.n_layers + 1
    tensor_seeds = np.random.SeedSequence(config.seed).generate_state(
        n_tensors, dtype=np.uint64
    )
    seeds = iter(int(s) for s in tensor_seeds)

    embed = seeded_matrix(next(seeds), config.vocab_size, d, 1.0)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=seeded_matrix(next(seeds), d, d, d**-0.5),
                wk=seeded_matrix(next(seeds), d, d, d**-0.5),
                wv=seeded_matrix(next(seeds), d, d, d**-0.5),
                wo=seeded_matrix(next(seeds), d, d, d**-0.5),
                w_in=seeded_matrix(next(seeds), d, h, d**-0.5),
                w_out=seeded_matrix(next(seeds), h, d, h**-0.5),
                # gains centered at 1 so early layers neither kill nor blow up signal
                gain_attn=1.0 + seeded_matrix(next(seeds), 1, d, 0.1)[0],
                gain_mlp=1.0 + seeded_matrix(next(seeds), 1, d, 0.1)[0],
            )
        )
    final_gain = 1.0 + seeded_matrix(next(seeds), 1, d, 0.1)[0]
    unembed = seeded_matrix(next(seeds), d, config.vocab_size, d**-0.5)

    _weight_allocations += 1
    return Weights(
        config=config,
        embed=embed,
        layers=layers,
        final_gain=final_gain,
        unembed=unembed,
    )


@dataclass
class KvCache:
    """Per-layer, per-head K/V rows for one decode session.

    Backed by preallocated (n_layers, n_heads, max_seq, head_dim) arrays;
    rows written at position p are never rewritten, so cached entries stay
    stable as later tokens are appended. Owned by exactly one session.
    """

    config: ModelConfig
    k: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)
    length: int = 0

    def __post_init__(self):
        c = self.config
        shape = (c.n_layers, c.n_heads, c.max_seq, c.head_dim)
        if self.k is None:
            self.k = np.zeros(shape)
        if self.v is None:
            self.v = np.zeros(shape)

    def store(self, layer: int, pos: int, k_heads: np.ndarray, v_heads: np.ndarray):
        self.k[layer, :, pos, :] = k_heads
        self.v[layer, :, pos, :] = v_heads

    def keys(self, layer: int, head: int, upto: int | None = None) -> np.ndarray:
        return self.k[layer, head, : (self.length if upto is None else upto)]

    def values(self, layer: int, head: int, upto: int | None = None) -> np.ndarray:
        return self.v[layer, head, : (self.length if upto is None else upto)]


def _rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return (x / scale) * gain


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def rotary_encode(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Rotate consecutive dimension pairs of x by position-dependent angles.

    x has shape (..., n, head_dim) with one position per row; pair i turns
    at frequency ROTARY_BASE**(-2i/head_dim).
    """
    head_dim = x.shape[-1]
    inv_freq = ROTARY_BASE ** (-np.arange(0, head_dim, 2) / head_dim)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def attention_reference(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Exact softmax attention; the oracle every partition test merges against.

    Scores are Q K^T with no internal scaling (callers fold any scaling
    into Q). A causal mask applies when Q has more than one row, aligning
    Q's last row with K's last row.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.shape[0] != V.shape[0]:
        raise DimensionError("K and V must have the same number of rows")
    if Q.shape[1] != K.shape[1]:
        raise DimensionError("Q and K width mismatch")
    n_q, n_k = Q.shape[0], K.shape[0]
    if n_q > 1 and n_q > n_k:
        raise DimensionError("causal attention needs at least as many keys as queries")
    scores = Q @ K.T
    out = np.empty((n_q, V.shape[1]))
    offset = n_k - n_q
    for i in range(n_q):
        visible = n_k if n_q == 1 else offset + i + 1
        stats = stable_softmax_stats(scores[i, :visible])
        out[i] = stats.weights @ V[:visible]
    return out


def _project_heads(x: np.ndarray, w: np.ndarray, config: ModelConfig) -> np.ndarray:
    # (n, d) @ (d, d) -> (n, n_heads, head_dim)
    return (x @ w).reshape(x.shape[0], config.n_heads, config.head_dim)


def _attention_block(
    weights: Weights,
    layer: int,
    x: np.ndarray,
    positions: np.ndarray,
    cache: KvCache | None,
) -> np.ndarray:
    """Causal multi-head attention over x itself, optionally filling cache."""
    c = weights.config
    lw = weights.layers[layer]
    h = _rms_norm(x, lw.gain_attn)
    q = rotary_encode(
        _project_heads(h, lw.wq, c).transpose(1, 0, 2), positions
    ) * c.head_dim**-0.5
    k = rotary_encode(_project_heads(h, lw.wk, c).transpose(1, 0, 2), positions)
    v = _project_heads(h, lw.wv, c).transpose(1, 0, 2)
    if cache is not None:
        for pos in range(x.shape[0]):
            cache.store(layer, pos, k[:, pos, :], v[:, pos, :])
    heads = [
        attention_reference(q[head], k[head], v[head]) for head in range(c.n_heads)
    ]
    merged = np.concatenate(heads, axis=-1)
    return x + merged @ lw.wo


def _mlp_block(weights: Weights, layer: int, x: np.ndarray) -> np.ndarray:
    lw = weights.layers[layer]
    h = _rms_norm(x, lw.gain_mlp)
    return x + _silu(h @ lw.w_in) @ lw.w_out


def full_forward(weights: Weights, tokens) -> np.ndarray:
    """Logits for every position of tokens, recomputed from scratch."""
    c = weights.config
    tokens = list(tokens)
    if not 1 <= len(tokens) <= c.max_seq:
        raise ValueError(f"sequence length must be in [1, {c.max_seq}]")
    positions = np.arange(len(tokens))
    x = weights.embed[tokens]
    for layer in range(c.n_layers):
        x = _attention_block(weights, layer, x, positions, cache=None)
        x = _mlp_block(weights, layer, x)
    return _rms_norm(x, weights.final_gain) @ weights.unembed


def prefill(weights: Weights, tokens) -> tuple[KvCache, np.ndarray]:
    """Run the prompt through the model, filling a fresh KV cache.

    Returns the populated cache and the next-token logits of the last
    prompt position.
    """
    c = weights.config
    tokens = list(tokens)
    if len(tokens) == 0:
        raise ValueError("cannot prefill an empty prompt")
    if len(tokens) > c.max_seq:
        raise CacheFullError(f"prompt of {len(tokens)} tokens exceeds max_seq={c.max_seq}")
    cache = KvCache(config=c)
    positions = np.arange(len(tokens))
    x = weights.embed[tokens]
    for layer in range(c.n_layers):
        x = _attention_block(weights, layer, x, positions, cache=cache)
        x = _mlp_block(weights, layer, x)
    cache.length = len(tokens)
    logits = (_rms_norm(x, weights.final_gain) @ weights.unembed)[-1]
    return cache, logits


def decode_step_monolithic(weights: Weights, cache: KvCache, token: int) -> np.ndarray:
    """Append token's K/V to the cache and return next-token logits.

    Equivalent (within 1e-10) to recomputing the full sequence without a
    cache; see the cache/no-cache equivalence tests.
    """
    c = weights.config
    if cache.length == 0:
        raise ValueError("decode requires a prefilled cache")
    if cache.length >= c.max_seq:
        raise CacheFullError(f"cache full at max_seq={c.max_seq}")
    pos = cache.length
    positions = np.array([pos])
    x = weights.embed[[token]]
    for layer in range(c.n_layers):
        lw = weights.layers[layer]
        h = _rms_norm(x, lw.gain_attn)
        q = rotary_encode(
            _project_heads(h, lw.wq, c).transpose(1, 0, 2), positions
        ) * c.head_dim**-0.5
        k = rotary_encode(_project_heads(h, lw.wk, c).transpose(1, 0, 2), positions)
        v = _project_heads(h, lw.wv, c).transpose(1, 0, 2)
        cache.store(layer, pos, k[:, 0, :], v[:, 0, :])
        heads = [
            attention_reference(
                q[head, 0], cache.keys(layer, head, pos + 1), cache.values(layer, head, pos + 1)
            )[0]
            for head in range(c.n_heads)
        ]
        x = x + np.concatenate(heads)[None, :] @ lw.wo
        x = _mlp_block(weights, layer, x)
    cache.length = pos + 1
    return (_rms_norm(x, weights.final_gain) @ weights.unembed)[0]


def sample_token(logits: np.ndarray, temperature: float | None = None, seed: int = 0) -> int:
    """Pick the next token: greedy argmax by default, seeded sampling if
    a temperature is given.

    Greedy ties break to the lowest token index. Temperature sampling with
    the same seed is reproducible.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if temperature is None:
        return int(np.argmax(logits))
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    stats = stable_softmax_stats(logits / temperature)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return int(rng.choice(logits.size, p=stats.weights))


def greedy_decode(
    weights: Weights, tokens, max_new_tokens: int, stop_at_eos: bool = True
) -> list[int]:
    """Monolithic cached greedy decode; the trusted single-party baseline."""
    cache, logits = prefill(weights, tokens)
    out = [sample_token(logits)]
    eos = weights.config.eos_token
    for _ in range(max_new_tokens):
        if stop_at_eos and out[-1] == eos:
            break
        if cache.length >= weights.config.max_seq:
            break
        logits = decode_step_monolithic(weights, cache, out[-1])
        out.append(sample_token(logits))
    return out


def save_weights(weights: Weights, path):
    """Write weights in the portable binary layout (see module docstring)."""
    c = weights.config
    header = struct.pack(
        "<7i", c.n_layers, c.n_heads, c.d_model, c.head_dim, c.vocab_size, c.max_seq, c.seed
    )
    with open(path, "wb") as fh:
        fh.write(WEIGHT_FILE_MAGIC)
        fh.write(header)
        for tensor in weights.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_weights(path) -> Weights:
    """Read a weight file; raises FileFormatError on any malformation."""
    global _weight_allocations
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(WEIGHT_FILE_MAGIC):
        raise FileFormatError("bad magic bytes")
    off = len(WEIGHT_FILE_MAGIC)
    try:
        n_layers, n_heads, d_model, head_dim, vocab, max_seq, seed = struct.unpack_from(
            "<7i", data, off
        )
    except struct.error as exc:
        raise FileFormatError("truncated config header") from exc
    off += struct.calcsize("<7i")
    config = ModelConfig(n_layers, n_heads, d_model, head_dim, vocab, max_seq, seed)

    def take(rows, cols):
        nonlocal off
        nbytes = rows * cols * 8
        if off + nbytes > len(data):
            raise FileFormatError("truncated tensor data")
        out = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
        off += nbytes
        return out.reshape(rows, cols).astype(np.float64)

    d, h = config.d_model, config.mlp_hidden
    embed = take(config.vocab_size, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                wq=take(d, d),
                wk=take(d, d),
                wv=take(d, d),
                wo=take(d, d),
                w_in=take(d, h),
                w_out=take(h, d),
                gain_attn=take(1, d)[0],
                gain_mlp=take(1, d)[0],
            )
        )
    final_gain = take(1, d)[0]
    unembed = take(d, config.vocab_size)
    if off != len(data):
        raise FileFormatError(f"{len(data) - off} trailing bytes")
    _weight_allocations += 1
    return Weights(
        config=config, embed=embed, layers=layers, final_gain=final_gain, unembed=unembed
    )

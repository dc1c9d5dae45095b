"""Decoder-only transformer with explicit positions over a role-tagged KV cache.

Llama-flavored at toy scale: RMSNorm, rotary positions, SwiGLU MLP, no
biases, no dropout. Two entry points cover training and inference:

* ``forward_full``: one dense pass over a whole layout with its cascade mask;
  also reports the per-layer K/V it would have cached, making it the oracle
  the incremental path is tested against.
* ``prefill`` / ``decode_step``: extend a :class:`KvCache`, attending over
  cached entries plus the incoming block, with visibility derived from the
  cached role tags.

Prompt tokens arrive as continuous embedding rows and never pass through the
token embedding table.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import layout as L
from . import tensor as T
from .rope import rope_apply, rope_freqs

CHECKPOINT_VERSION = 1
_MODEL_MAGIC = b"KVCM"
_PROMPT_MAGIC = b"KVCP"
_CACHE_MAGIC = b"KVCC"

_KIND_TAGS = {L.SHARED: 0, L.PROMPT: 1, L.INPUT: 2, L.OUTPUT: 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_NO_MODEL = 255


class CheckpointError(ValueError):
    """Bad magic, version, or truncated checkpoint data."""


class CacheError(ValueError):
    """Cache misuse: position regression, overflow, or config mismatch."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    ffn_dim: int = 256
    vocab_size: int = 64
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    max_seq: int = 256

    def __post_init__(self):
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError("d_model must equal n_heads * head_dim")
        if self.head_dim % 2:
            raise ValueError("head_dim must be even")
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    def packed(self) -> bytes:
        return struct.pack("<7I2d", self.d_model, self.n_layers, self.n_heads,
                           self.head_dim, self.ffn_dim, self.vocab_size,
                           self.max_seq, self.rope_base, self.norm_eps)

    @staticmethod
    def unpacked(blob: bytes) -> "ModelConfig":
        d, nl, nh, hd, ff, vs, ms, base, eps = struct.unpack("<7I2d", blob)
        return ModelConfig(d, nl, nh, hd, ff, vs, base, eps, ms)

    def config_hash(self) -> int:
        return int.from_bytes(hashlib.sha256(self.packed()).digest()[:8], "little")


_CONFIG_BYTES = struct.calcsize("<7I2d")


@dataclass
class LayerWeights:
    attn_norm: T.Tensor
    wq: T.Tensor
    wk: T.Tensor
    wv: T.Tensor
    wo: T.Tensor
    mlp_norm: T.Tensor
    w_gate: T.Tensor
    w_up: T.Tensor
    w_down: T.Tensor

    def tensors(self) -> list[T.Tensor]:
        return [self.attn_norm, self.wq, self.wk, self.wv, self.wo,
                self.mlp_norm, self.w_gate, self.w_up, self.w_down]


class ModelWeights:
    """Embeddings, per-layer blocks, final norm, and the output projection."""

    def __init__(self, config: ModelConfig, embed: T.Tensor, layers: list[LayerWeights],
                 final_norm: T.Tensor, output_proj: T.Tensor):
        self.config = config
        self.embed = embed
        self.layers = layers
        self.final_norm = final_norm
        self.output_proj = output_proj

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator,
             init_std: float = 0.02) -> "ModelWeights":
        d, ff, v = config.d_model, config.ffn_dim, config.vocab_size

        def w(*shape):
            return T.Tensor(rng.normal(0.0, init_std, shape))

        layers = [LayerWeights(T.Tensor(np.ones(d)), w(d, d), w(d, d), w(d, d), w(d, d),
                               T.Tensor(np.ones(d)), w(d, ff), w(d, ff), w(ff, d))
                  for _ in range(config.n_layers)]
        return cls(config, w(v, d), layers, T.Tensor(np.ones(d)), w(d, v))

    def tensors(self) -> list[T.Tensor]:
        out = [self.embed]
        for lw in self.layers:
            out.extend(lw.tensors())
        out += [self.final_norm, self.output_proj]
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_MODEL_MAGIC)
            f.write(struct.pack("<I", CHECKPOINT_VERSION))
            f.write(self.config.packed())
            for t in self.tensors():
                f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ModelWeights":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != _MODEL_MAGIC:
            raise CheckpointError(f"not a model checkpoint: {path}")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = ModelConfig.unpacked(blob[8:8 + _CONFIG_BYTES])
        weights = cls.init(config, np.random.default_rng(0))
        off = 8 + _CONFIG_BYTES
        for t in weights.tensors():
            n = int(np.prod(t.shape)) * 4
            if off + n > len(blob):
                raise CheckpointError(f"truncated checkpoint: {path}")
            t.data = np.frombuffer(blob[off:off + n], dtype="<f4").reshape(t.shape).astype(T.dtype())
            off += n
        if off != len(blob):
            raise CheckpointError(f"trailing bytes in checkpoint: {path}")
        return weights


class KvCache:
    """Per-layer key/value rows plus (position, role) metadata per entry.

    Buffers are preallocated to ``max_entries`` so appends never reallocate;
    keys are stored after rotary rotation, so absolute positions are baked in
    and a filtered view keeps working despite position gaps.
    """

    def __init__(self, config: ModelConfig, max_entries: int | None = None):
        self.config = config
        self.max_entries = config.max_seq if max_entries is None else max_entries
        shape = (config.n_layers, config.n_heads, self.max_entries, config.head_dim)
        self.k_buf = np.zeros(shape, dtype=T.dtype())
        self.v_buf = np.zeros(shape, dtype=T.dtype())
        self.positions = np.zeros(self.max_entries, dtype=np.int64)
        self.role_kinds = np.zeros(self.max_entries, dtype=np.uint8)
        self.role_models = np.full(self.max_entries, _NO_MODEL, dtype=np.uint8)
        self.length = 0

    @property
    def last_position(self) -> int:
        return int(self.positions[self.length - 1]) if self.length else -1

    def k_view(self, layer: int) -> np.ndarray:
        return self.k_buf[layer, :, :self.length]

    def v_view(self, layer: int) -> np.ndarray:
        return self.v_buf[layer, :, :self.length]

    def roles(self) -> list[L.SegmentRole]:
        out = []
        for i in range(self.length):
            kind = _TAG_KINDS[int(self.role_kinds[i])]
            m = int(self.role_models[i])
            out.append(L.SegmentRole(kind, None if m == _NO_MODEL else m))
        return out

    def extend(self, positions: np.ndarray, roles: list[L.SegmentRole],
               ks: list[np.ndarray], vs: list[np.ndarray]) -> None:
        t = len(positions)
        if self.length + t > self.max_entries:
            raise CacheError(f"cache overflow: {self.length}+{t} > {self.max_entries}")
        if t and self.length and int(positions[0]) <= self.last_position:
            raise CacheError(f"position regression: {positions[0]} after {self.last_position}")
        n = self.length
        for li in range(self.config.n_layers):
            self.k_buf[li, :, n:n + t] = ks[li]
            self.v_buf[li, :, n:n + t] = vs[li]
        self.positions[n:n + t] = positions
        for i, r in enumerate(roles):
            self.role_kinds[n + i] = _KIND_TAGS[r.kind]
            self.role_models[n + i] = _NO_MODEL if r.model_id is None else r.model_id
        self.length = n + t

    def clone(self) -> "KvCache":
        c = KvCache(self.config, self.max_entries)
        c.k_buf[...] = self.k_buf
        c.v_buf[...] = self.v_buf
        c.positions[...] = self.positions
        c.role_kinds[...] = self.role_kinds
        c.role_models[...] = self.role_models
        c.length = self.length
        return c

    def save(self, path) -> None:
        itemsize = T.dtype().itemsize
        with open(path, "wb") as f:
            f.write(_CACHE_MAGIC)
            f.write(struct.pack("<IQB3I", CHECKPOINT_VERSION, self.config.config_hash(),
                                itemsize, self.config.n_layers, self.config.n_heads,
                                self.config.head_dim))
            f.write(struct.pack("<I", self.length))
            for li in range(self.config.n_layers):
                f.write(np.ascontiguousarray(self.k_view(li)).tobytes())
                f.write(np.ascontiguousarray(self.v_view(li)).tobytes())
            for i in range(self.length):
                f.write(struct.pack("<IBB", int(self.positions[i]),
                                    int(self.role_kinds[i]), int(self.role_models[i])))

    @classmethod
    def load(cls, path, config: ModelConfig) -> "KvCache":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != _CACHE_MAGIC:
            raise CheckpointError(f"not a cache file: {path}")
        version, chash, itemsize, nl, nh, hd = struct.unpack_from("<IQB3I", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported cache version {version}")
        if chash != config.config_hash():
            raise CacheError(f"cache config hash mismatch: {path}")
        off = 4 + struct.calcsize("<IQB3I")
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        dt = np.dtype("<f4") if itemsize == 4 else np.dtype("<f8")
        cache = cls(config)
        block = nh * length * hd * itemsize
        need = off + 2 * nl * block + length * 6
        if len(blob) != need:
            raise CheckpointError(f"truncated or oversized cache file: {path}")
        for li in range(nl):
            k = np.frombuffer(blob[off:off + block], dtype=dt).reshape(nh, length, hd)
            off += block
            v = np.frombuffer(blob[off:off + block], dtype=dt).reshape(nh, length, hd)
            off += block
            cache.k_buf[li, :, :length] = k.astype(T.dtype())
            cache.v_buf[li, :, :length] = v.astype(T.dtype())
        for i in range(length):
            pos, kind, model = struct.unpack_from("<IBB", blob, off)
            off += 6
            cache.positions[i] = pos
            cache.role_kinds[i] = kind
            cache.role_models[i] = model
        cache.length = length
        return cache


def cache_save(cache: KvCache, destination) -> None:
    cache.save(destination)


def cache_load(source, config: ModelConfig) -> KvCache:
    return KvCache.load(source, config)


def filter_cache(cache: KvCache, keep) -> KvCache:
    """Copy of the cache keeping entries whose role satisfies ``keep``.

    Positions are preserved as-is; gaps are fine because rotary rotation is
    already baked into the stored keys.
    """
    idx = np.array([i for i, r in enumerate(cache.roles()) if keep(r)], dtype=np.int64)
    out = KvCache(cache.config, cache.max_entries)
    n = len(idx)
    out.k_buf[:, :, :n] = cache.k_buf[:, :, idx]
    out.v_buf[:, :, :n] = cache.v_buf[:, :, idx]
    out.positions[:n] = cache.positions[idx]
    out.role_kinds[:n] = cache.role_kinds[idx]
    out.role_models[:n] = cache.role_models[idx]
    out.length = n
    return out


def embed_sequence(weights: ModelWeights, pieces: list) -> T.Tensor:
    """Stack embedding rows: int arrays go through the token table, Tensors
    (prompt blocks) pass straight through."""
    parts = []
    for p in pieces:
        if isinstance(p, T.Tensor):
            parts.append(p)
        else:
            parts.append(T.embed_rows(weights.embed, np.asarray(p, dtype=np.int64)))
    return T.concat_rows(parts)


def _run_layers(weights: ModelWeights, x: T.Tensor, positions: np.ndarray,
                mask: np.ndarray, cache: KvCache | None, write_cache: bool,
                roles: list[L.SegmentRole] | None, collect_kv: bool,
                attn_probe: list | None):
    """Shared transformer stack over an incoming block.

    ``mask`` is (T, S) where S counts cache entries first, then the incoming
    block. Returns (hidden, logits, kv_per_layer).
    """
    cfg = weights.config
    freqs = rope_freqs(cfg.head_dim, cfg.rope_base)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    kv_out = []
    new_kv = []
    for li, lw in enumerate(weights.layers):
        normed = T.rmsnorm(x, lw.attn_norm, cfg.norm_eps)
        q = T.split_heads(T.matmul(normed, lw.wq), cfg.n_heads)
        k = T.split_heads(T.matmul(normed, lw.wk), cfg.n_heads)
        v = T.split_heads(T.matmul(normed, lw.wv), cfg.n_heads)
        q = rope_apply(q, positions, freqs)
        k = rope_apply(k, positions, freqs)
        if cache is not None and cache.length:
            k_all = T.concat_seq(T.Tensor(cache.k_view(li)), k)
            v_all = T.concat_seq(T.Tensor(cache.v_view(li)), v)
        else:
            k_all, v_all = k, v
        scores = T.scale(T.attn_scores(q, k_all), scale)
        probs = T.softmax_rows(scores, mask)
        if attn_probe is not None:
            attn_probe.append(probs.data.copy())
        mixed = T.merge_heads(T.attn_mix(probs, v_all))
        x = T.add(x, T.matmul(mixed, lw.wo))
        normed2 = T.rmsnorm(x, lw.mlp_norm, cfg.norm_eps)
        x = T.add(x, T.swiglu(normed2, lw.w_gate, lw.w_up, lw.w_down))
        if collect_kv:
            kv_out.append((k.data.copy(), v.data.copy()))
        if write_cache:
            new_kv.append((k.data, v.data))
    hidden = T.rmsnorm(x, weights.final_norm, cfg.norm_eps)
    logits = T.matmul(hidden, weights.output_proj)
    if write_cache and cache is not None:
        cache.extend(positions, roles, [kv[0] for kv in new_kv], [kv[1] for kv in new_kv])
    return hidden, logits, kv_out


def forward_full(weights: ModelWeights, config: ModelConfig, embeddings: T.Tensor,
                 layout: L.SegmentLayout, positions: np.ndarray | None = None,
                 mask_foreign_prompts: bool = True, collect_kv: bool = False,
                 attn_probe: list | None = None):
    """Dense single-pass forward under the layout's cascade mask.

    Returns (logits, kv) with kv the per-layer (K, V) arrays, identical to
    what prefilling the same block would have written to a cache.
    """
    if layout.total != embeddings.shape[0]:
        raise T.ShapeError(f"layout length {layout.total} vs {embeddings.shape[0]} rows")
    if layout.total > config.max_seq:
        raise CacheError(f"sequence {layout.total} exceeds max_seq {config.max_seq}")
    if positions is None:
        positions = L.assign_positions(layout)
    mask = L.build_mask(layout, mask_foreign_prompts)
    _, logits, kv = _run_layers(weights, embeddings, positions, mask, None, False,
                                None, collect_kv, attn_probe)
    return logits, kv


def prefill(weights: ModelWeights, config: ModelConfig, embeddings: T.Tensor,
            roles: list[L.SegmentRole], positions: np.ndarray, cache: KvCache,
            mask_foreign_prompts: bool = True, attn_probe: list | None = None):
    """Append a block to the cache, attending over cache plus the block.

    Positions must continue strictly after the cache's last position.
    Returns (hidden, logits) for the incoming rows.
    """
    t = embeddings.shape[0]
    positions = np.asarray(positions, dtype=np.int64)
    if len(roles) != t or len(positions) != t:
        raise T.ShapeError("one role and one position per incoming row")
    if t and np.any(np.diff(positions) <= 0):
        raise CacheError("incoming positions must strictly increase")
    if t and cache.length and int(positions[0]) <= cache.last_position:
        raise CacheError(f"position regression: {positions[0]} after {cache.last_position}")
    vis = L.visibility_matrix(roles, cache.roles() + list(roles), mask_foreign_prompts)
    causal = np.concatenate(
        [np.ones((t, cache.length), dtype=bool), np.tril(np.ones((t, t), dtype=bool))], axis=1)
    hidden, logits, _ = _run_layers(weights, embeddings, positions, vis & causal,
                                    cache, True, list(roles), False, attn_probe)
    return hidden, logits


def decode_step(weights: ModelWeights, config: ModelConfig, last_embedding: T.Tensor,
                position: int, querying_role: L.SegmentRole, cache: KvCache,
                mask_foreign_prompts: bool = True, attn_probe: list | None = None):
    """One autoregressive step: append one entry, return next-token logits."""
    if cache.length and position != cache.last_position + 1:
        raise CacheError(f"decode position {position}, cache ends at {cache.last_position}")
    emb = last_embedding
    if emb.ndim == 1:
        emb = T.Tensor(emb.data[None, :])
    _, logits = prefill(weights, config, emb, [querying_role],
                        np.array([position], dtype=np.int64), cache,
                        mask_foreign_prompts, attn_probe)
    return T.Tensor(logits.data[0])


def greedy_token(logits: np.ndarray) -> int:
    """Deterministic argmax sampler; ties resolve to the lowest id."""
    return int(np.argmax(logits))

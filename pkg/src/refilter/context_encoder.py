"""Chunk encoder, hidden-space projection, token-pool assembly, feature cache.

The encoder is a small bidirectional (non-causal) transformer producing
token-level features of shape (s, d_e) per chunk. A bias-free linear map
projects features into the backbone's hidden space, and the top-k chunks
of each query are concatenated in retrieval-rank order into a token pool
of exactly N = k * s slots: slot j holds token (j mod s) of the rank
(j // s) chunk.

Pre-projection features are cacheable: training the projection never
invalidates the cache, and the cache is keyed by a stamp over the encoder
parameters so any encoder update invalidates every entry.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Chunk
from .errors import CacheError, ConfigError, DimensionError
from .numerics import (
    Parameter,
    Tensor,
    concat,
    embedding,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    softmax,
    transpose,
)
from .retriever import RetrievalResult
from .seeding import make_rng


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    chunk_len: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"encoder d_model {self.d_model} not divisible by heads {self.n_heads}"
            )


class ContextEncoder:
    """Bidirectional token encoder; output shape (B, s, d_e)."""

    def __init__(self, config: EncoderConfig, seed: int = 0, prefix: str = "encoder"):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = make_rng("encoder-init", seed)
        d = config.d_model

        def param(name: str, shape: tuple[int, ...], std: float = 0.02) -> Parameter:
            data = rng.normal(0.0, std, size=shape) if std else np.zeros(shape)
            p = Parameter(f"{prefix}.{name}", Tensor(data, requires_grad=True))
            self.params[p.name] = p
            return p

        self.tok_emb = param("tok_emb", (config.vocab_size, d))
        self.pos_emb = param("pos_emb", (config.chunk_len, d))
        self.blocks = []
        for i in range(config.n_layers):
            blk = {
                "ln1_g": param(f"blocks.{i}.ln1_g", (d,), std=0.0),
                "ln1_b": param(f"blocks.{i}.ln1_b", (d,), std=0.0),
                "wq": param(f"blocks.{i}.wq", (d, d)),
                "wk": param(f"blocks.{i}.wk", (d, d)),
                "wv": param(f"blocks.{i}.wv", (d, d)),
                "wo": param(f"blocks.{i}.wo", (d, d)),
                "ln2_g": param(f"blocks.{i}.ln2_g", (d,), std=0.0),
                "ln2_b": param(f"blocks.{i}.ln2_b", (d,), std=0.0),
                "w1": param(f"blocks.{i}.w1", (d, 4 * d)),
                "b1": param(f"blocks.{i}.b1", (4 * d,), std=0.0),
                "w2": param(f"blocks.{i}.w2", (4 * d, d)),
                "b2": param(f"blocks.{i}.b2", (d,), std=0.0),
            }
            blk["ln1_g"].data[...] = 1.0
            blk["ln2_g"].data[...] = 1.0
            self.blocks.append(blk)
        self.lnf_g = param("lnf_g", (d,), std=0.0)
        self.lnf_b = param("lnf_b", (d,), std=0.0)
        self.lnf_g.data[...] = 1.0

    def encode(self, token_ids: np.ndarray) -> Tensor:
        """token_ids (B, s) -> features (B, s, d_e), full bidirectional attention."""
        token_ids = np.asarray(token_ids, dtype=np.intp)
        if token_ids.ndim != 2 or token_ids.shape[1] != self.config.chunk_len:
            raise DimensionError(
                f"encoder expects (B, {self.config.chunk_len}) token ids, "
                f"got {token_ids.shape}"
            )
        B, s = token_ids.shape
        d = self.config.d_model
        H = self.config.n_heads
        hd = d // H
        x = embedding(self.tok_emb.tensor, token_ids) + embedding(
            self.pos_emb.tensor, np.arange(s)
        )
        for blk in self.blocks:
            a = layer_norm(x, blk["ln1_g"].tensor, blk["ln1_b"].tensor)
            q = transpose(reshape(matmul(a, blk["wq"].tensor), (B, s, H, hd)), (0, 2, 1, 3))
            k = transpose(reshape(matmul(a, blk["wk"].tensor), (B, s, H, hd)), (0, 2, 1, 3))
            v = transpose(reshape(matmul(a, blk["wv"].tensor), (B, s, H, hd)), (0, 2, 1, 3))
            scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
            ctx = matmul(softmax(scores, axis=-1), v)
            ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, s, d))
            x = x + matmul(ctx, blk["wo"].tensor)
            h = layer_norm(x, blk["ln2_g"].tensor, blk["ln2_b"].tensor)
            h = matmul(h, blk["w1"].tensor) + blk["b1"].tensor
            x = x + (matmul(gelu(h), blk["w2"].tensor) + blk["b2"].tensor)
        return layer_norm(x, self.lnf_g.tensor, self.lnf_b.tensor)

    def encode_chunk(self, chunk: Chunk) -> Tensor:
        """Single-chunk convenience wrapper; output (s, d_e)."""
        out = self.encode(np.asarray([chunk.token_ids]))
        return reshape(out, (self.config.chunk_len, self.config.d_model))

    def stamp(self) -> str:
        """Hash over parameter values; changes whenever the encoder trains."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()[:16]


class Projector:
    """Bias-free linear map d_e -> d_m (the context encoder's second half)."""

    def __init__(self, d_e: int, d_m: int, seed: int = 0, prefix: str = "proj"):
        rng = make_rng("proj-init", seed)
        self.w_p = Parameter(
            f"{prefix}.w_p",
            Tensor(rng.normal(0.0, 0.02, size=(d_e, d_m)), requires_grad=True),
        )
        self.params = {self.w_p.name: self.w_p}

    def project(self, f: Tensor) -> Tensor:
        """f (..., d_e) -> (..., d_m); exactly linear, no bias, no activation."""
        return matmul(f, self.w_p.tensor)


def pool_origin(j: int, s: int) -> tuple[int, int]:
    """Slot j of the flattened pool comes from chunk rank j // s, offset j % s."""
    return j // s, j % s


@dataclass
class ContextEmbeddings:
    """Per-query flattened token pool C with its origin bookkeeping.

    ``tensor`` has shape (B, N, d_m) with N = k * s. Layout arrays are
    (B, N); rank/offset are shared across the batch by construction.
    """

    tensor: Tensor
    chunk_ids: np.ndarray  # (B, N) object array of chunk ids
    token_ids: np.ndarray  # (B, N) int
    pad_flags: np.ndarray  # (B, N) bool, True where the token is padding
    noise_flags: np.ndarray  # (B, N) bool, True for is_noise chunks
    k: int
    s: int

    @property
    def n_slots(self) -> int:
        return self.k * self.s

    def origin(self, j: int) -> tuple[int, int]:
        return pool_origin(j, self.s)


def build_pool(
    batch_chunks: Sequence[Sequence[Chunk]],
    encoder: ContextEncoder,
    projector: Projector,
    pad_id: int,
    cache: "FeatureCache | None" = None,
) -> ContextEmbeddings:
    """Assemble the (B, N, d_m) pool from each query's k retrieved chunks.

    With a cache, features come from the store (constants on the graph);
    otherwise the encoder runs in-graph so its parameters receive
    gradients. All queries in the batch must carry the same k.
    """
    k = len(batch_chunks[0])
    s = encoder.config.chunk_len
    if any(len(chunks) != k for chunks in batch_chunks):
        raise DimensionError("all queries in a batch must retrieve the same k chunks")
    B = len(batch_chunks)
    flat: list[Chunk] = [c for chunks in batch_chunks for c in chunks]
    ids = np.asarray([c.token_ids for c in flat], dtype=np.intp)  # (B*k, s)
    if cache is not None:
        feats_np = np.empty((len(flat), s, encoder.config.d_model))
        missing = [i for i, c in enumerate(flat) if cache.get(c.chunk_id) is None]
        if missing:
            with no_grad():
                fresh = encoder.encode(ids[missing]).data
            for row, i in enumerate(missing):
                cache.put(flat[i].chunk_id, fresh[row])
        for i, c in enumerate(flat):
            feats_np[i] = cache.get(c.chunk_id)
        feats = Tensor(feats_np)
    else:
        feats = encoder.encode(ids)  # (B*k, s, d_e)
    pooled = reshape(feats, (B, k * s, encoder.config.d_model))
    tensor = projector.project(pooled)  # (B, N, d_m)

    chunk_ids = np.empty((B, k * s), dtype=object)
    token_ids = np.empty((B, k * s), dtype=np.int64)
    pad_flags = np.zeros((B, k * s), dtype=bool)
    noise_flags = np.zeros((B, k * s), dtype=bool)
    for b, chunks in enumerate(batch_chunks):
        for rank, chunk in enumerate(chunks):
            lo = rank * s
            chunk_ids[b, lo : lo + s] = chunk.chunk_id
            token_ids[b, lo : lo + s] = chunk.token_ids
            pad_flags[b, lo : lo + s] = np.asarray(chunk.token_ids) == pad_id
            noise_flags[b, lo : lo + s] = chunk.is_noise
    return ContextEmbeddings(
        tensor=tensor,
        chunk_ids=chunk_ids,
        token_ids=token_ids,
        pad_flags=pad_flags,
        noise_flags=noise_flags,
        k=k,
        s=s,
    )


# -- feature cache -------------------------------------------------------------

_CACHE_MAGIC = b"RFCACHE1"
_CACHE_VERSION = 1


class FeatureCache:
    """chunk_id -> pre-projection feature (s, d_e), persisted to one file.

    Entries are only valid for the encoder stamp they were computed under;
    loading a file with a different stamp yields an empty cache.
    """

    def __init__(self, stamp: str, d_e: int, s: int):
        self.stamp = stamp
        self.d_e = d_e
        self.s = s
        self._store: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, chunk_id: str) -> np.ndarray | None:
        return self._store.get(chunk_id)

    def put(self, chunk_id: str, feature: np.ndarray) -> None:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.s, self.d_e):
            raise DimensionError(
                f"feature shape {feature.shape} != ({self.s}, {self.d_e})"
            )
        self._store[chunk_id] = feature.copy()

    def save(self, path: str | Path) -> None:
        ids = sorted(self._store)
        header = {"stamp": self.stamp, "d_e": self.d_e, "s": self.s, "chunk_ids": ids}
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(_CACHE_MAGIC)
            f.write(struct.pack("<IQ", _CACHE_VERSION, len(blob)))
            f.write(blob)
            for cid in ids:
                f.write(self._store[cid].astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, current_stamp: str) -> "FeatureCache":
        try:
            with open(path, "rb") as f:
                if f.read(8) != _CACHE_MAGIC:
                    raise CacheError(f"{path}: not a feature cache file")
                version, hlen = struct.unpack("<IQ", f.read(12))
                if version != _CACHE_VERSION:
                    raise CacheError(f"{path}: cache version {version} unsupported")
                header = json.loads(f.read(hlen).decode("utf-8"))
                cache = cls(current_stamp, header["d_e"], header["s"])
                record = 8 * header["d_e"] * header["s"]
                if header["stamp"] != current_stamp:
                    return cache  # stale: every entry is invalid
                for cid in header["chunk_ids"]:
                    raw = f.read(record)
                    if len(raw) != record:
                        raise CacheError(f"{path}: truncated record for '{cid}'")
                    cache._store[cid] = np.frombuffer(raw, dtype="<f8").reshape(
                        header["s"], header["d_e"]
                    ).copy()
                return cache
        except (OSError, json.JSONDecodeError, struct.error) as exc:
            raise CacheError(f"{path}: unreadable cache: {exc}") from exc

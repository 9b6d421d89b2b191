"""Okapi BM25 inverted index over chunks, top-k search, and recall.

Scoring: score(q, c) = sum_t idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len/avglen))
with idf(t) = ln((Nc - df + 0.5) / (df + 0.5) + 1). The +1 inside the log
keeps idf non-negative on tiny corpora. Ties are broken by ascending
chunk_id so results are fully deterministic.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Chunk, tokenize
from .errors import DataError

_MAGIC = b"RFIDX1\x00\x00"

K1_DEFAULT = 1.2
B_DEFAULT = 0.75


@dataclass
class RetrievalResult:
    """Ranked retrieval for one query; scores non-increasing, length <= k."""

    query_id: str
    ranked: list[tuple[str, float]]
    k: int
    padded_ids: tuple[str, ...] = ()

    @property
    def chunk_ids(self) -> list[str]:
        return [cid for cid, _ in self.ranked]


class InvertedIndex:
    """Immutable-after-build BM25 index; safe for concurrent searches."""

    def __init__(self, k1: float = K1_DEFAULT, b: float = B_DEFAULT):
        self.k1 = k1
        self.b = b
        self.chunk_ids: list[str] = []
        self.lengths: np.ndarray = np.zeros(0, dtype=np.int64)
        self.avg_length = 0.0
        # term -> (ordinals ascending, term frequencies), parallel arrays
        self.postings: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_chunks(self) -> int:
        return len(self.chunk_ids)

    def idf(self, term: str) -> float:
        df = len(self.postings[term][0]) if term in self.postings else 0
        n = self.n_chunks
        return float(np.log((n - df + 0.5) / (df + 0.5) + 1.0))


def build_index(
    chunks: Iterable[Chunk], k1: float = K1_DEFAULT, b: float = B_DEFAULT
) -> InvertedIndex:
    """Build an index over the chunk stream; idempotent for equal input."""
    index = InvertedIndex(k1=k1, b=b)
    term_lists: dict[str, list[tuple[int, int]]] = {}
    lengths: list[int] = []
    seen: set[str] = set()
    for ordinal, chunk in enumerate(chunks):
        if chunk.chunk_id in seen:
            raise DataError(f"duplicate chunk_id '{chunk.chunk_id}' in index build")
        seen.add(chunk.chunk_id)
        index.chunk_ids.append(chunk.chunk_id)
        tokens = tokenize(chunk.text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            term_lists.setdefault(term, []).append((ordinal, tf))
    index.lengths = np.asarray(lengths, dtype=np.int64)
    index.avg_length = float(index.lengths.mean()) if lengths else 0.0
    for term, pairs in term_lists.items():
        # Pairs arrive in ordinal order already; keep the invariant explicit.
        pairs.sort()
        ords = np.asarray([p[0] for p in pairs], dtype=np.int64)
        tfs = np.asarray([p[1] for p in pairs], dtype=np.int64)
        index.postings[term] = (ords, tfs)
    return index


def search(index: InvertedIndex, query: str, k: int) -> RetrievalResult:
    """Top-k BM25 search, padded to exactly k entries when possible.

    If fewer than k chunks score above zero, the result is extended with
    the lexicographically smallest unused chunk_ids (flagged in
    ``padded_ids``) so downstream token pools always hold k * s tokens.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    n = index.n_chunks
    scores = np.zeros(n, dtype=np.float64)
    # Repeated query terms contribute once per occurrence.
    for term, qtf in Counter(tokenize(query)).items():
        if term not in index.postings:
            continue
        ords, tfs = index.postings[term]
        idf = index.idf(term)
        denom = tfs + index.k1 * (
            1.0 - index.b + index.b * index.lengths[ords] / index.avg_length
        )
        scores[ords] += qtf * idf * tfs * (index.k1 + 1.0) / denom
    hit = np.nonzero(scores > 0.0)[0]
    order = sorted(hit, key=lambda o: (-scores[o], index.chunk_ids[o]))[:k]
    ranked = [(index.chunk_ids[o], float(scores[o])) for o in order]
    padded: list[str] = []
    if len(ranked) < k:
        used = {cid for cid, _ in ranked}
        remaining = sorted(cid for cid in index.chunk_ids if cid not in used)
        for cid in remaining[: k - len(ranked)]:
            ranked.append((cid, 0.0))
            padded.append(cid)
    return RetrievalResult(query_id=query, ranked=ranked, k=k, padded_ids=tuple(padded))


def recall_at_k(result: RetrievalResult, gold_chunk_ids: Sequence[str]) -> float:
    """1.0 if any gold chunk is present in the ranked list, else 0.0."""
    gold = set(gold_chunk_ids)
    return 1.0 if any(cid in gold for cid in result.chunk_ids) else 0.0


def dataset_recall(
    index: InvertedIndex, queries: Sequence[tuple[str, Sequence[str]]], k: int
) -> float:
    """Mean recall@k over queries; empty-gold queries are excluded."""
    values = []
    for question, gold in queries:
        if not gold:
            continue
        values.append(recall_at_k(search(index, question, k), gold))
    return float(np.mean(values)) if values else 0.0


@dataclass
class SweepRow:
    k: int
    recall: float
    downstream: dict[str, float] = field(default_factory=dict)


def recall_vs_k_sweep(
    index: InvertedIndex,
    queries: Sequence[tuple[str, Sequence[str]]],
    k_values: Sequence[int],
) -> list[SweepRow]:
    """One row per k with recall filled; downstream metrics are filled by
    the evaluation harness."""
    if list(k_values) != sorted(k_values):
        raise DataError(f"k_values must be ascending, got {list(k_values)}")
    return [SweepRow(k=k, recall=dataset_recall(index, queries, k)) for k in k_values]


# -- persistence --------------------------------------------------------------
#
# Layout: magic (8 bytes), u32 version, u64 header length, header JSON
# (constants, counts, chunk ids, per-chunk lengths, term list with posting
# lengths), then per-term posting arrays as little-endian int64 pairs in
# header term order. Building twice from the same stream yields identical
# bytes.

_VERSION = 1


def save_index(index: InvertedIndex, path: str | Path) -> None:
    terms = sorted(index.postings)
    header = {
        "k1": index.k1,
        "b": index.b,
        "avg_length": index.avg_length,
        "n_chunks": index.n_chunks,
        "chunk_ids": index.chunk_ids,
        "lengths": index.lengths.tolist(),
        "terms": [[t, len(index.postings[t][0])] for t in terms],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for t in terms:
            ords, tfs = index.postings[t]
            f.write(ords.astype("<i8").tobytes())
            f.write(tfs.astype("<i8").tobytes())


def load_index(path: str | Path) -> InvertedIndex:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise DataError(f"{path}: not an index file")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise DataError(f"{path}: index version {version}, expected {_VERSION}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        index = InvertedIndex(k1=header["k1"], b=header["b"])
        index.chunk_ids = list(header["chunk_ids"])
        index.lengths = np.asarray(header["lengths"], dtype=np.int64)
        index.avg_length = float(header["avg_length"])
        for term, n in header["terms"]:
            ords = np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)
            tfs = np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)
            index.postings[term] = (ords, tfs)
    return index

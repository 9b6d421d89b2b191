"""BM25 index vs an independent oracle, recall, persistence."""

import math
from collections import Counter

import numpy as np
import pytest

from refilter.corpus import Chunk, build_vocab, chunk_document, tokenize
from refilter.errors import DataError
from refilter.retriever import (
    InvertedIndex,
    RetrievalResult,
    build_index,
    dataset_recall,
    load_index,
    recall_at_k,
    recall_vs_k_sweep,
    save_index,
    search,
)


def bm25_oracle(chunks: list[Chunk], query: str, k1=1.2, b=0.75) -> dict[str, float]:
    """Independent closed-form BM25, no inverted index, no shared code path."""
    docs = [tokenize(c.text) for c in chunks]
    n = len(docs)
    avg = sum(len(d) for d in docs) / n if n else 0.0
    df = Counter()
    for d in docs:
        for t in set(d):
            df[t] += 1
    scores = {}
    for c, d in zip(chunks, docs):
        score = 0.0
        tf = Counter(d)
        for term in tokenize(query):
            if df[term] == 0:
                continue
            idf = math.log((n - df[term] + 0.5) / (df[term] + 0.5) + 1.0)
            f = tf[term]
            if f:
                score += idf * f * (k1 + 1.0) / (f + k1 * (1 - b + b * len(d) / avg))
        scores[c.chunk_id] = score
    return scores


def _chunks(texts, prefix="c"):
    return [
        Chunk(f"{prefix}{i:02d}", f"{prefix}{i:02d}", t, tuple(range(len(tokenize(t)))))
        for i, t in enumerate(texts)
    ]


HAND_CORPORA = [
    ["the cat sat", "a dog ran fast", "mesopotamia river history"],
    ["alpha beta beta", "beta gamma", "alpha alpha alpha", "delta"],
    ["one two three four five", "two two two", "three four", "five five one",
     "six seven", "one", "two three four five six", "seven eight nine",
     "nine nine nine", "eight"],
]


class TestBM25Oracle:
    @pytest.mark.parametrize("texts", HAND_CORPORA)
    def test_scores_match_independent_oracle(self, texts):
        chunks = _chunks(texts)
        index = build_index(chunks)
        for query in ["the cat", "beta", "two three", "nine", "alpha delta", "unseen"]:
            expected = bm25_oracle(chunks, query)
            result = search(index, query, k=len(chunks))
            for cid, score in result.ranked:
                assert score == pytest.approx(expected[cid], abs=1e-9)

    def test_random_small_corpora_match_oracle(self):
        rng = np.random.default_rng(0)
        words = ["red", "blue", "green", "gold", "iron", "salt", "wind", "rain"]
        for trial in range(20):
            n = int(rng.integers(2, 11))
            texts = [
                " ".join(rng.choice(words, size=rng.integers(2, 9)))
                for _ in range(n)
            ]
            chunks = _chunks(texts, prefix=f"t{trial}_")
            index = build_index(chunks)
            query = " ".join(rng.choice(words, size=3))
            expected = bm25_oracle(chunks, query)
            for cid, score in search(index, query, k=n).ranked:
                assert score == pytest.approx(expected[cid], abs=1e-9)

    def test_unique_term_ranks_its_chunk_first(self):
        chunks = _chunks(["plain text here", "mesopotamia appears once", "more plain text"])
        result = search(build_index(chunks), "mesopotamia", k=3)
        assert result.ranked[0][0] == "c01"
        assert result.ranked[0][1] > 0.0


class TestSearchContract:
    def test_k_larger_than_corpus_returns_all(self):
        chunks = _chunks(["a b", "b c", "c d"])
        result = search(build_index(chunks), "b c d", k=10)
        assert len(result.ranked) == 3

    def test_no_matching_terms_pads_lexicographically(self):
        chunks = _chunks(["a b", "b c", "c d"])
        result = search(build_index(chunks), "zzz", k=2)
        assert result.chunk_ids == ["c00", "c01"]
        assert result.padded_ids == ("c00", "c01")
        assert all(score == 0.0 for _, score in result.ranked)

    def test_pads_to_exactly_k(self):
        chunks = _chunks(["unique1 here", "unrelated words", "other stuff"])
        result = search(build_index(chunks), "unique1", k=3)
        assert len(result.ranked) == 3
        assert len(result.padded_ids) == 2

    def test_tie_break_ascending_chunk_id(self):
        chunks = _chunks(["same words", "same words", "same words"])
        result = search(build_index(chunks), "same", k=3)
        assert result.chunk_ids == ["c00", "c01", "c02"]

    def test_deterministic(self):
        chunks = _chunks(["x y z", "y z w", "z w v"])
        index = build_index(chunks)
        a = search(index, "y z", k=3)
        b = search(index, "y z", k=3)
        assert a.ranked == b.ranked

    def test_duplicate_chunk_id_rejected(self):
        c = _chunks(["a"])[0]
        with pytest.raises(DataError):
            build_index([c, c])

    def test_empty_index(self):
        index = build_index([])
        assert index.n_chunks == 0 and index.avg_length == 0.0


class TestRecall:
    def _result(self, ids):
        return RetrievalResult("q", [(i, 1.0) for i in ids], k=len(ids))

    def test_gold_at_rank_two(self):
        assert recall_at_k(self._result(["a"]), ["b"]) == 0.0
        assert recall_at_k(self._result(["a", "b", "c"]), ["b"]) == 1.0

    def test_monotone_in_k(self):
        ids = [f"c{i}" for i in range(10)]
        gold = ["c6"]
        values = [recall_at_k(self._result(ids[:k]), gold) for k in range(1, 11)]
        assert values == sorted(values)

    def test_empty_gold_excluded_from_dataset_mean(self):
        chunks = _chunks(["find this", "other text"])
        index = build_index(chunks)
        queries = [("find", ["c00"]), ("other", [])]
        assert dataset_recall(index, queries, k=1) == 1.0

    def test_sweep_shape_and_monotonicity(self):
        chunks = _chunks(["apple pie", "apple tart", "banana bread", "cherry cake"])
        index = build_index(chunks)
        queries = [("apple", ["c01"]), ("banana", ["c02"]), ("cherry cake", ["c03"])]
        rows = recall_vs_k_sweep(index, queries, [1, 3, 5])
        assert [r.k for r in rows] == [1, 3, 5]
        recalls = [r.recall for r in rows]
        assert recalls == sorted(recalls)

    def test_sweep_requires_ascending_k(self):
        with pytest.raises(DataError):
            recall_vs_k_sweep(build_index(_chunks(["a"])), [], [3, 1])

    def test_planted_rank_one_gives_full_recall(self):
        texts = [f"unique{i} filler words" for i in range(8)]
        chunks = _chunks(texts)
        index = build_index(chunks)
        queries = [(f"unique{i}", [f"c{i:02d}"]) for i in range(8)]
        for k in (1, 2, 4):
            assert dataset_recall(index, queries, k) == 1.0

    def test_thousand_random_queries_monotone(self):
        rng = np.random.default_rng(1)
        words = [f"w{i}" for i in range(40)]
        texts = [" ".join(rng.choice(words, size=8)) for _ in range(50)]
        chunks = _chunks(texts)
        index = build_index(chunks)
        for _ in range(1000):
            query = " ".join(rng.choice(words, size=3))
            gold = [f"c{rng.integers(50):02d}"]
            values = [
                recall_at_k(search(index, query, k), gold) for k in (1, 3, 5, 10)
            ]
            assert values == sorted(values)


class TestPersistence:
    def test_roundtrip_preserves_search(self, tmp_path):
        chunks = _chunks(["alpha beta", "beta gamma", "gamma delta delta"])
        index = build_index(chunks)
        path = tmp_path / "idx.bin"
        save_index(index, path)
        loaded = load_index(path)
        for query in ("alpha", "beta gamma", "delta"):
            assert search(index, query, 3).ranked == search(loaded, query, 3).ranked

    def test_rebuild_identical_bytes(self, tmp_path):
        chunks = _chunks(["alpha beta", "beta gamma"])
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_index(build_index(chunks), p1)
        save_index(build_index(chunks), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not an index file at all")
        with pytest.raises(DataError):
            load_index(path)

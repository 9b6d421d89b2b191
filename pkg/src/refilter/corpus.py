"""Tokenization, document chunking, dataset I/O, and noise injection.

File formats (UTF-8, one JSON object per line):
  corpus / noise pool: {"doc_id": str, "text": str}
  QA: {"question": str, "answers": [str, ...],
       "gold_chunk_ids": [str, ...], "split": "train"|"dev"|"test"}
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DataError
from .seeding import make_rng

_WORD_RE = re.compile(r"\w+|[^\w\s]")

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation split."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Bijective token <-> id map with reserved special ids."""

    def __init__(self, tokens: Iterable[str]):
        self.id_to_token: list[str] = list(SPECIALS) + [
            t for t in tokens if t not in SPECIALS
        ]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary tokens are not unique")
        self.pad_id = self.token_to_id[PAD]
        self.bos_id = self.token_to_id[BOS]
        self.eos_id = self.token_to_id[EOS]
        self.unk_id = self.token_to_id[UNK]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokenize(text)]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            tok = self.id_to_token[int(i)]
            if skip_special and tok in SPECIALS:
                continue
            out.append(tok)
        return " ".join(out)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token[len(SPECIALS):]})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text)["tokens"])


def build_vocab(texts: Iterable[str], max_size: int = 2048) -> Vocabulary:
    """Frequency-ordered word vocabulary; ties broken by first appearance."""
    if max_size < len(SPECIALS):
        raise ConfigError(
            f"max_size {max_size} cannot hold the {len(SPECIALS)} special tokens"
        )
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    n = 0
    seen_any = False
    for text in texts:
        seen_any = True
        for tok in tokenize(text):
            counts[tok] += 1
            if tok not in first_seen:
                first_seen[tok] = n
                n += 1
    if not seen_any:
        raise DataError("build_vocab requires a non-empty text stream")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocabulary(ranked[: max_size - len(SPECIALS)])


@dataclass(frozen=True)
class Chunk:
    """A fixed-length token window from one document."""

    chunk_id: str
    doc_id: str
    text: str
    token_ids: tuple[int, ...]
    is_noise: bool = False


@dataclass(frozen=True)
class QAExample:
    question: str
    answers: tuple[str, ...]
    gold_chunk_ids: tuple[str, ...]
    split: str

    def __post_init__(self):
        if not self.answers:
            raise DataError("QAExample requires at least one answer")


def make_chunk_id(doc_id: str, ordinal: int) -> str:
    # Zero-padded so lexicographic chunk_id order matches document order.
    return f"{doc_id}#{ordinal:04d}"


def chunk_document(
    doc_id: str, text: str, s: int, vocab: Vocabulary, is_noise: bool = False
) -> list[Chunk]:
    """Non-overlapping windows of ``s`` tokens; the last window is padded."""
    if s < 1:
        raise ConfigError(f"chunk length must be >= 1, got {s}")
    tokens = tokenize(text)
    if not tokens:
        return []
    chunks = []
    for ordinal, start in enumerate(range(0, len(tokens), s)):
        window = tokens[start : start + s]
        ids = vocab.encode_tokens(window)
        ids = ids + [vocab.pad_id] * (s - len(ids))
        chunks.append(
            Chunk(
                chunk_id=make_chunk_id(doc_id, ordinal),
                doc_id=doc_id,
                text=" ".join(window),
                token_ids=tuple(ids),
                is_noise=is_noise,
            )
        )
    return chunks


def round_half_up(x: float) -> int:
    """0.5 rounds up: used for the noise replacement count."""
    return int(np.floor(x + 0.5))


def inject_noise(
    chunks: list[Chunk], noise_pool: list[Chunk], fraction: float, seed: int
) -> list[Chunk]:
    """Replace round_half_up(fraction * k) positions with noise chunks.

    Positions are drawn uniformly without replacement from the seeded
    generator; surviving chunks keep their original positions.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"noise fraction must be in [0, 1], got {fraction}")
    k = len(chunks)
    n_replace = round_half_up(fraction * k)
    if n_replace == 0:
        return list(chunks)
    if len(noise_pool) < n_replace:
        raise DataError(
            f"noise pool has {len(noise_pool)} chunks, need {n_replace} replacements"
        )
    rng = make_rng("inject_noise", seed)
    positions = rng.choice(k, size=n_replace, replace=False)
    picks = rng.choice(len(noise_pool), size=n_replace, replace=False)
    out = list(chunks)
    for pos, pick in zip(positions, picks):
        src = noise_pool[int(pick)]
        out[int(pos)] = Chunk(
            chunk_id=src.chunk_id,
            doc_id=src.doc_id,
            text=src.text,
            token_ids=src.token_ids,
            is_noise=True,
        )
    return out


# -- line-delimited I/O -------------------------------------------------------


def _read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record: {exc}") from exc
            yield lineno, record


def load_documents(path: str | Path) -> list[tuple[str, str]]:
    """Read a corpus/noise file into (doc_id, text) pairs, rejecting dupes."""
    docs: list[tuple[str, str]] = []
    seen: set[str] = set()
    for lineno, record in _read_jsonl(path):
        try:
            doc_id, text = record["doc_id"], record["text"]
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
        if doc_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate doc_id '{doc_id}'")
        seen.add(doc_id)
        docs.append((doc_id, text))
    return docs


def load_corpus(
    path: str | Path, s: int, vocab: Vocabulary, is_noise: bool = False
) -> list[Chunk]:
    """Load and chunk a corpus file in stable doc order."""
    chunks: list[Chunk] = []
    seen: set[str] = set()
    for doc_id, text in load_documents(path):
        for chunk in chunk_document(doc_id, text, s, vocab, is_noise=is_noise):
            if chunk.chunk_id in seen:
                raise DataError(f"duplicate chunk_id '{chunk.chunk_id}'")
            seen.add(chunk.chunk_id)
            chunks.append(chunk)
    return chunks


def load_dataset(path: str | Path) -> list[QAExample]:
    examples = []
    for lineno, record in _read_jsonl(path):
        try:
            examples.append(
                QAExample(
                    question=record["question"],
                    answers=tuple(record["answers"]),
                    gold_chunk_ids=tuple(record.get("gold_chunk_ids", ())),
                    split=record.get("split", "train"),
                )
            )
        except (KeyError, DataError) as exc:
            raise DataError(f"{path}:{lineno}: bad QA record: {exc}") from exc
    return examples


def save_documents(path: str | Path, docs: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, text in docs:
            f.write(json.dumps({"doc_id": doc_id, "text": text}) + "\n")


def save_dataset(path: str | Path, examples: Iterable[QAExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(
                json.dumps(
                    {
                        "question": ex.question,
                        "answers": list(ex.answers),
                        "gold_chunk_ids": list(ex.gold_chunk_ids),
                        "split": ex.split,
                    }
                )
                + "\n"
            )

"""Prompt construction and teacher-forcing sequence assembly.

Two prompt shapes share one grammar:

  question-only: <bos> question <q tokens> answer
  retrieve-then-read: <bos> context <chunk tokens...> question <q tokens> answer

The fusion model always uses the question-only shape; retrieved text never
enters its prompt, so its prompt length is independent of k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Chunk, Vocabulary
from .errors import DimensionError

CONTEXT_WORD = "context"
QUESTION_WORD = "question"
ANSWER_WORD = "answer"


def question_prompt(vocab: Vocabulary, question: str) -> list[int]:
    return (
        [vocab.bos_id]
        + vocab.encode(QUESTION_WORD)
        + vocab.encode(question)
        + vocab.encode(ANSWER_WORD)
    )


def srag_prompt(
    vocab: Vocabulary,
    chunks: list[Chunk],
    question: str,
    max_prompt_len: int | None = None,
) -> tuple[list[int], bool]:
    """Concatenated chunk texts + question. Grows by ~k*s tokens with k.

    When the prompt would exceed ``max_prompt_len``, the oldest chunks
    (earliest in the prompt) are dropped first; the flag reports whether
    truncation happened.
    """
    tail = vocab.encode(QUESTION_WORD) + vocab.encode(question) + vocab.encode(ANSWER_WORD)
    kept = list(chunks)
    truncated = False

    def assemble(cs: list[Chunk]) -> list[int]:
        ids = [vocab.bos_id] + vocab.encode(CONTEXT_WORD)
        for c in cs:
            ids.extend(c.token_ids)
        return ids + tail

    ids = assemble(kept)
    if max_prompt_len is not None:
        while len(ids) > max_prompt_len and kept:
            kept = kept[1:]
            truncated = True
            ids = assemble(kept)
        if len(ids) > max_prompt_len:
            raise DimensionError(
                f"prompt of {len(ids)} tokens cannot fit in {max_prompt_len}"
            )
    return ids, truncated


def answer_ids(vocab: Vocabulary, answer: str) -> list[int]:
    return vocab.encode(answer) + [vocab.eos_id]


@dataclass
class TeacherSequence:
    """One teacher-forced example: inputs, masked targets, injection positions."""

    inputs: list[int]         # sequence fed to the model, length P
    targets: list[int]        # next-token targets, -100 outside the answer
    positions: list[int]      # input positions whose next token is supervised


IGNORE = -100


def teacher_sequence(prompt: list[int], answer: list[int]) -> TeacherSequence:
    seq = prompt + answer
    inputs = seq[:-1]
    targets = [IGNORE] * len(inputs)
    positions = []
    for i in range(len(prompt) - 1, len(seq) - 1):
        targets[i] = seq[i + 1]
        positions.append(i)
    return TeacherSequence(inputs=inputs, targets=targets, positions=positions)


def batch_arrays(seqs: list[TeacherSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack same-length sequences into (inputs, targets, positions) arrays."""
    lengths = {len(s.inputs) for s in seqs}
    if len(lengths) != 1:
        raise DimensionError(f"batch mixes sequence lengths {sorted(lengths)}")
    n_pos = {len(s.positions) for s in seqs}
    if len(n_pos) != 1:
        raise DimensionError("batch mixes supervision lengths")
    inputs = np.asarray([s.inputs for s in seqs], dtype=np.intp)
    targets = np.asarray([s.targets for s in seqs], dtype=np.int64)
    positions = np.asarray([s.positions for s in seqs], dtype=np.intp)
    return inputs, targets, positions

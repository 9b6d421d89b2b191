"""QA metrics, baseline predictors, and condition-tagged evaluation runs.

Metrics follow the usual SQuAD conventions: answers are lowercased,
articles and punctuation stripped, whitespace collapsed; token F1 and
exact match take the max over acceptable answers.

Three methods share one evaluation path:

  vanilla    question-only prompt, no retrieval
  srag       retrieve-then-read: top-k chunk texts prepended to the prompt
  refilter   question-only prompt plus latent fusion of the token pool
"""

from __future__ import annotations

import csv
import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .context_encoder import FeatureCache, build_pool
from .corpus import Chunk, QAExample, inject_noise
from .errors import ConfigError
from .fusion import FusionDiagnostics, ReFilterModel
from .prompts import question_prompt, srag_prompt
from .seeding import derive_seed, make_rng

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNC_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    s = s.lower().translate(_PUNC_TABLE)
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


def token_f1(prediction: str, golds: list[str] | tuple[str, ...]) -> float:
    """Bag-of-tokens F1, max over acceptable answers."""
    if not golds:
        raise ConfigError("token_f1 requires at least one gold answer")
    pred_tokens = normalize_answer(prediction).split()
    best = 0.0
    for gold in golds:
        gold_tokens = normalize_answer(gold).split()
        common = Counter(pred_tokens) & Counter(gold_tokens)
        same = sum(common.values())
        if same == 0 or not pred_tokens or not gold_tokens:
            continue
        precision = same / len(pred_tokens)
        recall = same / len(gold_tokens)
        best = max(best, 2 * precision * recall / (precision + recall))
    return best


def exact_match(prediction: str, golds: list[str] | tuple[str, ...]) -> float:
    if not golds:
        raise ConfigError("exact_match requires at least one gold answer")
    norm = normalize_answer(prediction)
    return 1.0 if any(norm == normalize_answer(g) for g in golds) else 0.0


def choice_accuracy(prediction: str, golds: list[str] | tuple[str, ...]) -> float:
    """Option-letter equality: the first letter of each side decides."""
    if not golds:
        raise ConfigError("choice_accuracy requires at least one gold answer")
    pred = normalize_answer(prediction)
    letter = pred.split()[0][:1] if pred.split() else ""
    return 1.0 if any(letter == normalize_answer(g)[:1] for g in golds) else 0.0


METRICS = {"em": exact_match, "f1": token_f1, "accuracy": choice_accuracy}


@dataclass
class EvalRecord:
    question: str
    prediction: str
    golds: tuple[str, ...]
    value: float
    k: int
    condition: dict


@dataclass
class GateStats:
    """Running means of gate/weight mass by token origin."""

    gate_noise_sum: float = 0.0
    gate_noise_n: int = 0
    gate_gold_sum: float = 0.0
    gate_gold_n: int = 0
    # per-example (correct, answer-token mean W_t > pool mean W_t)
    answer_vs_pool: list[tuple[bool, bool]] = field(default_factory=list)

    @property
    def mean_gate_noise(self) -> float:
        return self.gate_noise_sum / max(1, self.gate_noise_n)

    @property
    def mean_gate_gold(self) -> float:
        return self.gate_gold_sum / max(1, self.gate_gold_n)

    def answer_above_fraction(self) -> float:
        """Fraction of correctly answered queries whose gold-answer tokens
        carry above-average weight."""
        correct = [above for ok, above in self.answer_vs_pool if ok]
        return float(np.mean(correct)) if correct else 0.0


@dataclass
class EvalReport:
    method: str
    metric_name: str
    condition: dict
    records: list[EvalRecord] = field(default_factory=list)
    recall: float | None = None
    gate_stats: GateStats | None = None

    @property
    def aggregate(self) -> float:
        return float(np.mean([r.value for r in self.records])) if self.records else 0.0


def write_report_jsonl(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in report.records:
            f.write(
                json.dumps(
                    {
                        "question": r.question,
                        "prediction": r.prediction,
                        "golds": list(r.golds),
                        "value": r.value,
                        "k": r.k,
                        "condition": r.condition,
                    }
                )
                + "\n"
            )


def write_summary_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        return
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


# -- prediction ----------------------------------------------------------------


def decode_prediction(vocab, ids: list[int]) -> str:
    return vocab.decode(ids, skip_special=True)


def eval_chunks_for_example(
    data,
    example: QAExample,
    k: int,
    noise_fraction: float = 0.0,
    shuffle: bool = False,
    run_seed: int = 0,
    example_index: int = 0,
) -> list[Chunk]:
    """Retrieve top-k, then apply the run's noise/shuffle transforms."""
    chunks = data.retrieve_chunks(example.question, k)
    if noise_fraction > 0.0:
        chunks = inject_noise(
            chunks,
            data.noise_chunks,
            noise_fraction,
            seed=derive_seed(run_seed, "noise", example_index),
        )
    if shuffle:
        rng = make_rng("shuffle", run_seed, example_index)
        chunks = [chunks[int(i)] for i in rng.permutation(len(chunks))]
    return chunks


def _batched(indices: list[int], size: int) -> list[list[int]]:
    return [indices[lo : lo + size] for lo in range(0, len(indices), size)]


def evaluate_method(
    model: ReFilterModel,
    data,
    examples: list[QAExample],
    method: str,
    k: int,
    metric: str = "em",
    noise_fraction: float = 0.0,
    shuffle: bool = False,
    run_seed: int = 0,
    max_new: int = 6,
    batch_size: int = 64,
    cache: FeatureCache | None = None,
    collect_gates: bool = False,
    condition_extra: dict | None = None,
) -> EvalReport:
    """Greedy-decode every example under one condition and score it."""
    if method not in ("vanilla", "srag", "refilter"):
        raise ConfigError(f"unknown method '{method}'")
    metric_fn = METRICS[metric]
    vocab = data.vocab
    condition = {
        "method": method,
        "k": k,
        "noise_fraction": noise_fraction,
        "shuffle": shuffle,
        "seed": run_seed,
    }
    if condition_extra:
        condition.update(condition_extra)
    report = EvalReport(method=method, metric_name=metric, condition=condition)
    stats = GateStats() if (collect_gates and method == "refilter") else None

    chunk_lists: list[list[Chunk] | None] = []
    recalls: list[float] = []
    for i, ex in enumerate(examples):
        if method == "vanilla":
            chunk_lists.append(None)
            continue
        chunks = eval_chunks_for_example(
            data, ex, k, noise_fraction, shuffle, run_seed, i
        )
        chunk_lists.append(chunks)
        if ex.gold_chunk_ids:
            gold = set(ex.gold_chunk_ids)
            recalls.append(1.0 if any(c.chunk_id in gold for c in chunks) else 0.0)
    if recalls:
        report.recall = float(np.mean(recalls))

    if method == "refilter" and cache is None:
        cache = FeatureCache(
            model.encoder.stamp(), model.encoder.config.d_model, model.encoder.config.chunk_len
        )

    # Group by prompt length so batches stay rectangular.
    prompts: list[list[int]] = []
    for i, ex in enumerate(examples):
        if method == "srag":
            ids, _ = srag_prompt(
                vocab,
                chunk_lists[i],
                ex.question,
                max_prompt_len=model.backbone.config.max_positions - max_new,
            )
        else:
            ids = question_prompt(vocab, ex.question)
        prompts.append(ids)
    by_len: dict[int, list[int]] = {}
    for i, ids in enumerate(prompts):
        by_len.setdefault(len(ids), []).append(i)

    predictions: dict[int, str] = {}
    for length in sorted(by_len):
        for batch_idx in _batched(by_len[length], batch_size):
            prompt_arr = np.asarray([prompts[i] for i in batch_idx], dtype=np.intp)
            if method == "refilter":
                pool = build_pool(
                    [chunk_lists[i] for i in batch_idx],
                    model.encoder,
                    model.projector,
                    pad_id=vocab.pad_id,
                    cache=cache,
                )
                diag = FusionDiagnostics() if stats is not None else None
                outs = model.generate(
                    prompt_arr, pool, max_new=max_new, eos_id=vocab.eos_id, collect=diag
                )
                if stats is not None and diag is not None and diag.weights:
                    _accumulate_gate_stats(
                        stats, diag, pool, [examples[i] for i in batch_idx], vocab, outs
                    )
            else:
                outs = model.backbone.generate(
                    prompt_arr, max_new=max_new, eos_id=vocab.eos_id
                )
            for row, i in enumerate(batch_idx):
                predictions[i] = decode_prediction(vocab, outs[row])

    for i, ex in enumerate(examples):
        pred = predictions[i]
        report.records.append(
            EvalRecord(
                question=ex.question,
                prediction=pred,
                golds=ex.answers,
                value=metric_fn(pred, ex.answers),
                k=k,
                condition=condition,
            )
        )
    report.gate_stats = stats
    return report


def _accumulate_gate_stats(
    stats: GateStats,
    diag: FusionDiagnostics,
    pool,
    batch_examples: list[QAExample],
    vocab,
    outs: list[list[int]],
) -> None:
    """Fold one batch's prefill gate/weight diagnostics into the stats."""
    layers = sorted(diag.weights)
    gamma = np.mean([diag.weights[l].gamma for l in layers], axis=0)  # (B, N)
    w_t = np.mean([diag.weights[l].w_t for l in layers], axis=0)
    for b, ex in enumerate(batch_examples):
        noise_slots = pool.noise_flags[b]
        gold_ids = set(ex.gold_chunk_ids)
        gold_slots = np.asarray([cid in gold_ids for cid in pool.chunk_ids[b]])
        stats.gate_noise_sum += float(gamma[b][noise_slots].sum())
        stats.gate_noise_n += int(noise_slots.sum())
        stats.gate_gold_sum += float(gamma[b][gold_slots].sum())
        stats.gate_gold_n += int(gold_slots.sum())
        answer_token_ids = set(vocab.encode(ex.answers[0]))
        answer_slots = np.isin(pool.token_ids[b], list(answer_token_ids))
        if answer_slots.any():
            correct = exact_match(decode_prediction(vocab, outs[b]), ex.answers) == 1.0
            above = float(w_t[b][answer_slots].mean()) > float(w_t[b].mean())
            stats.answer_vs_pool.append((correct, above))

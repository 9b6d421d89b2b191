"""Metrics oracles, method prompts, report invariants, condition identities."""

import numpy as np
import pytest

from refilter.corpus import Chunk
from refilter.errors import ConfigError
from refilter.evaluation import (
    EvalRecord,
    EvalReport,
    choice_accuracy,
    evaluate_method,
    exact_match,
    normalize_answer,
    token_f1,
    write_report_jsonl,
)
from refilter.prompts import question_prompt, srag_prompt, teacher_sequence
from refilter.synth import SynthConfig, generate_world
from refilter.training import TaskData, TrainConfig, build_model


class TestNormalization:
    def test_articles_and_case(self):
        assert normalize_answer("The Iraq") == "iraq"

    def test_punctuation_and_whitespace(self):
        assert normalize_answer("  a  cat, sat.  ") == "cat sat"


class TestTokenF1:
    def test_article_difference_is_full_credit(self):
        assert token_f1("the Iraq", ["Iraq"]) == 1.0

    def test_disjoint_tokens_zero(self):
        assert token_f1("apple pie", ["stone wall"]) == 0.0

    def test_verbatim_match(self):
        assert token_f1("baghdad museum", ["baghdad museum"]) == 1.0

    def test_partial_overlap(self):
        # prediction "a b", gold "b c": precision 1/2, recall 1/2 -> F1 1/2
        assert token_f1("alpha beta", ["beta gamma"]) == pytest.approx(0.5)

    def test_max_over_golds(self):
        assert token_f1("chicago", ["new york", "chicago"]) == 1.0

    def test_empty_golds_rejected(self):
        with pytest.raises(ConfigError):
            token_f1("x", [])


class TestExactMatchAndAccuracy:
    def test_exact(self):
        assert exact_match("A", ["A"]) == 1.0

    def test_normalized_equality(self):
        assert exact_match("The  Iraq.", ["iraq"]) == 1.0

    def test_empty_prediction(self):
        assert exact_match("", ["x"]) == 0.0

    def test_choice_letter_with_punctuation(self):
        assert choice_accuracy("a.", ["A"]) == 1.0

    def test_choice_wrong_letter(self):
        assert choice_accuracy("b", ["A"]) == 0.0


class TestPrompts:
    @pytest.fixture(scope="class")
    def world_data(self):
        world = generate_world(SynthConfig(seed=9, n_train=30, n_test=10))
        cfg = TrainConfig(seed=9, epochs=1, pretrain_epochs=1, n_copy=20)
        return TaskData(world, cfg)

    def test_question_prompt_independent_of_k(self, world_data):
        ex = world_data.test_examples[0]
        prompt = question_prompt(world_data.vocab, ex.question)
        assert len(prompt) == 1 + 1 + 6 + 1  # bos, marker, question, marker

    def test_srag_prompt_grows_by_k_times_s(self, world_data):
        ex = world_data.test_examples[0]
        base = len(question_prompt(world_data.vocab, ex.question))
        for k in (1, 3, 5):
            chunks = world_data.retrieve_chunks(ex.question, k)
            ids, truncated = srag_prompt(world_data.vocab, chunks, ex.question)
            assert not truncated
            assert len(ids) == base + 1 + k * 16  # context marker + k*s tokens

    def test_srag_truncation_drops_oldest_first(self, world_data):
        ex = world_data.test_examples[0]
        chunks = world_data.retrieve_chunks(ex.question, 5)
        full, _ = srag_prompt(world_data.vocab, chunks, ex.question)
        limit = len(full) - 10  # force dropping one chunk
        ids, truncated = srag_prompt(
            world_data.vocab, chunks, ex.question, max_prompt_len=limit
        )
        assert truncated
        expected, _ = srag_prompt(world_data.vocab, chunks[1:], ex.question)
        assert ids == expected

    def test_teacher_sequence_positions(self):
        seq = teacher_sequence([5, 6, 7], [8, 9])
        assert seq.inputs == [5, 6, 7, 8]
        assert seq.targets == [-100, -100, 8, 9]
        assert seq.positions == [2, 3]


class TestEvaluateMethod:
    @pytest.fixture(scope="class")
    def setup(self):
        world = generate_world(SynthConfig(seed=11, n_train=30, n_test=12))
        cfg = TrainConfig(seed=11, epochs=1, pretrain_epochs=1, n_copy=20)
        data = TaskData(world, cfg)
        model = build_model(cfg, len(data.vocab), cfg.seed)
        return model, data

    def test_aggregate_is_mean_of_records(self, setup):
        model, data = setup
        rep = evaluate_method(
            model, data, data.test_examples, method="refilter", k=3, max_new=3
        )
        assert rep.aggregate == pytest.approx(
            float(np.mean([r.value for r in rep.records]))
        )
        assert len(rep.records) == len(data.test_examples)

    def test_condition_tags_on_every_record(self, setup):
        model, data = setup
        rep = evaluate_method(
            model, data, data.test_examples[:4], method="srag", k=3,
            noise_fraction=0.33, run_seed=5, max_new=3,
        )
        for r in rep.records:
            assert r.condition["method"] == "srag"
            assert r.condition["noise_fraction"] == 0.33
            assert r.condition["seed"] == 5

    def test_fraction_zero_equals_clean_run(self, setup):
        model, data = setup
        a = evaluate_method(
            model, data, data.test_examples, method="refilter", k=3,
            noise_fraction=0.0, run_seed=3, max_new=3,
        )
        b = evaluate_method(
            model, data, data.test_examples, method="refilter", k=3,
            run_seed=3, max_new=3,
        )
        assert [r.prediction for r in a.records] == [r.prediction for r in b.records]

    def test_k1_shuffle_is_identity(self, setup):
        model, data = setup
        a = evaluate_method(
            model, data, data.test_examples, method="refilter", k=1,
            shuffle=True, run_seed=3, max_new=3,
        )
        b = evaluate_method(
            model, data, data.test_examples, method="refilter", k=1,
            run_seed=3, max_new=3,
        )
        assert [r.prediction for r in a.records] == [r.prediction for r in b.records]

    def test_reproducible_under_fixed_seed(self, setup):
        model, data = setup
        kw = dict(method="srag", k=3, noise_fraction=0.66, run_seed=17, max_new=3)
        a = evaluate_method(model, data, data.test_examples, **kw)
        b = evaluate_method(model, data, data.test_examples, **kw)
        assert [r.prediction for r in a.records] == [r.prediction for r in b.records]

    def test_vanilla_ignores_retrieval(self, setup):
        model, data = setup
        a = evaluate_method(model, data, data.test_examples, method="vanilla", k=1, max_new=3)
        b = evaluate_method(model, data, data.test_examples, method="vanilla", k=8, max_new=3)
        assert [r.prediction for r in a.records] == [r.prediction for r in b.records]
        assert a.recall is None

    def test_unknown_method_rejected(self, setup):
        model, data = setup
        with pytest.raises(ConfigError):
            evaluate_method(model, data, data.test_examples, method="oracle", k=3)

    def test_recall_reflects_noise(self, setup):
        model, data = setup
        clean = evaluate_method(
            model, data, data.test_examples, method="srag", k=3, max_new=3
        )
        noisy = evaluate_method(
            model, data, data.test_examples, method="srag", k=3,
            noise_fraction=0.66, run_seed=1, max_new=3,
        )
        assert noisy.recall < clean.recall

    def test_report_jsonl_roundtrip(self, setup, tmp_path):
        import json

        model, data = setup
        rep = evaluate_method(
            model, data, data.test_examples[:3], method="vanilla", k=3, max_new=3
        )
        path = tmp_path / "rep.jsonl"
        write_report_jsonl(rep, path)
        rows = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(rows) == 3
        assert rows[0]["condition"]["method"] == "vanilla"

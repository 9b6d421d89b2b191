"""CLI: pipeline composition, determinism, error exit codes."""

import json
from pathlib import Path

import pytest

from refilter.cli import EXIT_DATA, EXIT_USAGE, main

TINY_CFG = {
    "epochs": 1,
    "pretrain_epochs": 1,
    "n_copy": 40,
    "batch_size": 8,
    "pretrain_batch_size": 16,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def cfg_file(workdir):
    path = workdir / "cfg.json"
    path.write_text(json.dumps(TINY_CFG))
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(workdir, monkeypatch_module=None):
    out = workdir / "data"
    rc = main([
        "synth", "--seed", "5", "--n-train", "24", "--n-test", "8",
        "--out", str(out),
    ])
    assert rc == 0
    return out


class TestSynth:
    def test_outputs_exist(self, synth_dir):
        for name in ("corpus.jsonl", "qa.jsonl", "noise.jsonl", "world.json",
                     "resolved_config.json"):
            assert (synth_dir / name).exists()

    def test_determinism(self, synth_dir, workdir):
        out2 = workdir / "data2"
        rc = main([
            "synth", "--seed", "5", "--n-train", "24", "--n-test", "8",
            "--out", str(out2),
        ])
        assert rc == 0
        for name in ("corpus.jsonl", "qa.jsonl", "noise.jsonl", "world.json"):
            assert (synth_dir / name).read_bytes() == (out2 / name).read_bytes()

    def test_resolved_config_echoed(self, synth_dir):
        payload = json.loads((synth_dir / "resolved_config.json").read_text())
        assert payload["command"] == "synth"
        assert payload["config"]["seed"] == 5


class TestPipeline:
    def test_index_cache_train_eval_bench_visualize(self, synth_dir, workdir, cfg_file):
        rc = main(["index", "--data", str(synth_dir), "--out", str(workdir / "index")])
        assert rc == 0
        assert (workdir / "index" / "bm25.idx").exists()

        rc = main([
            "train", "--data", str(synth_dir), "--config", cfg_file,
            "--seed", "5", "--out", str(workdir / "train"),
        ])
        assert rc == 0
        ckpt = workdir / "train" / "last_refilter.ckpt"
        assert ckpt.exists()

        rc = main([
            "cache", "--data", str(synth_dir), "--checkpoint", str(ckpt),
            "--out", str(workdir / "cache"),
        ])
        assert rc == 0
        assert (workdir / "cache" / "features.cache").exists()

        rc = main([
            "eval", "--data", str(synth_dir), "--checkpoint", str(ckpt),
            "--experiment", "clean", "--out", str(workdir / "eval"),
        ])
        assert rc == 0
        assert (workdir / "eval" / "clean_summary_seed5.csv").exists()

        rc = main([
            "bench", "--data", str(synth_dir), "--checkpoint", str(ckpt),
            "--batch-sizes", "1,2", "--trials", "2", "--gen-len", "4",
            "--out", str(workdir / "bench"),
        ])
        assert rc == 0
        assert (workdir / "bench" / "latency_summary.csv").exists()

        rc = main([
            "visualize", "--data", str(synth_dir), "--checkpoint", str(ckpt),
            "--query-index", "0", "--out", str(workdir / "vis"),
        ])
        assert rc == 0
        dumps = list((workdir / "vis").glob("weights_query*.jsonl"))
        assert dumps and len(dumps[0].read_text().splitlines()) == 3 * 16

    def test_noise_experiment(self, synth_dir, workdir):
        ckpt = workdir / "train" / "last_refilter.ckpt"
        rc = main([
            "eval", "--data", str(synth_dir), "--checkpoint", str(ckpt),
            "--experiment", "noise", "--out", str(workdir / "noise"),
        ])
        assert rc == 0
        assert (workdir / "noise" / "noise_summary_seed5.csv").exists()


class TestErrors:
    def test_missing_checkpoint_exits_data(self, synth_dir, workdir):
        rc = main([
            "eval", "--data", str(synth_dir),
            "--checkpoint", str(workdir / "nope.ckpt"),
            "--out", str(workdir / "e1"),
        ])
        assert rc == EXIT_DATA

    def test_unknown_flag_exits_usage(self, synth_dir, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--definitely-not-a-flag", "1"])
        assert exc.value.code == EXIT_USAGE

    def test_unknown_config_field_exits_usage(self, synth_dir, workdir):
        bad = workdir / "bad.json"
        bad.write_text(json.dumps({"not_a_field": 1}))
        rc = main([
            "index", "--data", str(synth_dir), "--config", str(bad),
            "--out", str(workdir / "e2"),
        ])
        assert rc == EXIT_USAGE

    def test_missing_config_file_exits_data(self, synth_dir, workdir):
        rc = main([
            "index", "--data", str(synth_dir), "--config", str(workdir / "ghost.json"),
            "--out", str(workdir / "e3"),
        ])
        assert rc == EXIT_DATA

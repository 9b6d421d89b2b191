"""Experiment suite: decoupling curves, noise/shuffle robustness, latency,
token-weight export, fusion-depth and lambda sweeps.

Every run is tagged with its full condition (method, k, noise fraction,
shuffle flag, seed) and emits line-delimited records plus a CSV summary;
file names encode {experiment}_{method}_{condition}_{seed}. Directional
comparisons are always made per seed, never from a single draw.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .context_encoder import FeatureCache, build_pool
from .corpus import QAExample
from .errors import ConfigError
from .evaluation import (
    EvalReport,
    evaluate_method,
    exact_match,
    write_report_jsonl,
    write_summary_csv,
)
from .fusion import ReFilterModel
from .gated_filter import write_weight_dump
from .numerics import no_grad
from .prompts import question_prompt, srag_prompt
from .retriever import recall_vs_k_sweep
from .seeding import derive_seed
from .synth import SynthConfig, generate_world
from .training import TaskData, TrainConfig, train_pipeline


def _report_path(out: Path, experiment: str, method: str, condition: str, seed: int) -> Path:
    return out / f"{experiment}_{method}_{condition}_seed{seed}.jsonl"


# -- noise robustness ------------------------------------------------------------


def run_noise(
    model: ReFilterModel,
    data: TaskData,
    examples: list[QAExample],
    methods: tuple[str, ...] = ("srag", "refilter"),
    fractions: tuple[float, ...] = (0.0, 0.33, 0.66),
    k: int = 3,
    run_seed: int = 0,
    out_dir: str | Path | None = None,
) -> dict[str, dict[float, EvalReport]]:
    """Evaluate each method at each injected-noise fraction."""
    out = Path(out_dir) if out_dir else None
    reports: dict[str, dict[float, EvalReport]] = {m: {} for m in methods}
    for method in methods:
        for fraction in fractions:
            rep = evaluate_method(
                model, data, examples, method=method, k=k,
                noise_fraction=fraction, run_seed=run_seed, max_new=4,
                collect_gates=(method == "refilter"),
            )
            reports[method][fraction] = rep
            if out:
                write_report_jsonl(
                    rep, _report_path(out, "noise", method, f"f{int(fraction * 100):02d}", run_seed)
                )
    if out:
        rows = [
            {
                "experiment": "noise", "method": m, "fraction": f,
                "metric": rep.aggregate, "recall": rep.recall, "seed": run_seed,
            }
            for m, per in reports.items()
            for f, rep in per.items()
        ]
        write_summary_csv(rows, out / f"noise_summary_seed{run_seed}.csv")
    return reports


# -- order-shuffle robustness ------------------------------------------------------


def run_shuffle(
    model: ReFilterModel,
    data: TaskData,
    examples: list[QAExample],
    methods: tuple[str, ...] = ("srag", "refilter"),
    k: int = 3,
    run_seed: int = 0,
    out_dir: str | Path | None = None,
) -> dict[str, dict]:
    """Paired in-order vs shuffled evaluation; reports per-example deltas."""
    out = Path(out_dir) if out_dir else None
    results: dict[str, dict] = {}
    for method in methods:
        in_order = evaluate_method(
            model, data, examples, method=method, k=k, run_seed=run_seed, max_new=4
        )
        shuffled = evaluate_method(
            model, data, examples, method=method, k=k, shuffle=True,
            run_seed=run_seed, max_new=4,
        )
        deltas = [
            a.value - b.value for a, b in zip(in_order.records, shuffled.records)
        ]
        results[method] = {
            "in_order": in_order,
            "shuffled": shuffled,
            "mean_abs_delta": float(np.mean(np.abs(deltas))) if deltas else 0.0,
            "deltas": deltas,
        }
        if out:
            write_report_jsonl(in_order, _report_path(out, "shuffle", method, "inorder", run_seed))
            write_report_jsonl(shuffled, _report_path(out, "shuffle", method, "shuffled", run_seed))
    if out:
        rows = [
            {
                "experiment": "shuffle", "method": m,
                "in_order": r["in_order"].aggregate,
                "shuffled": r["shuffled"].aggregate,
                "mean_abs_delta": r["mean_abs_delta"], "seed": run_seed,
            }
            for m, r in results.items()
        ]
        write_summary_csv(rows, out / f"shuffle_summary_seed{run_seed}.csv")
    return results


# -- top-k decoupling ---------------------------------------------------------------


def run_decoupling(
    model: ReFilterModel,
    data: TaskData,
    examples: list[QAExample],
    k_values: tuple[int, ...] = (1, 3, 5, 8),
    methods: tuple[str, ...] = ("srag", "refilter"),
    run_seed: int = 0,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Fill the retriever's recall sweep with the downstream metric per k."""
    queries = [(e.question, list(e.gold_chunk_ids)) for e in examples]
    sweep = recall_vs_k_sweep(data.index, queries, list(k_values))
    for row in sweep:
        for method in methods:
            rep = evaluate_method(
                model, data, examples, method=method, k=row.k,
                run_seed=run_seed, max_new=4,
            )
            row.downstream[method] = rep.aggregate
    rows = [
        {"k": row.k, "recall": row.recall, "seed": run_seed, **row.downstream}
        for row in sweep
    ]
    if out_dir:
        write_summary_csv(rows, Path(out_dir) / f"decoupling_summary_seed{run_seed}.csv")
    return rows


# -- latency -----------------------------------------------------------------------


@dataclass
class LatencyReport:
    method: str
    batch_size: int
    prompt_tokens: int
    wall_per_query_mean: float
    wall_per_query_p50: float
    wall_per_query_p90: float
    ttft: float  # median time to first token, per batch
    tokens_per_second: float  # median steady decode throughput
    trials: int


def _timed_generate(model: ReFilterModel, data: TaskData, method: str,
                    prompt: np.ndarray, chunk_lists, gen_len: int,
                    cache: FeatureCache | None) -> tuple[float, float, float]:
    """One timed trial: returns (total_wall, ttft, steady_seconds).

    Generation length is pinned (no eos early-exit) so methods and batch
    sizes compare like for like.
    """
    t0 = time.perf_counter()
    with no_grad():
        if method == "refilter":
            pool = build_pool(
                chunk_lists, model.encoder, model.projector,
                pad_id=data.vocab.pad_id, cache=cache,
            )
        seq = prompt
        B, p0 = prompt.shape
        start = p0 - 1
        t_first = None
        for step in range(gen_len):
            if method == "refilter":
                positions = np.broadcast_to(
                    np.arange(start, seq.shape[1]), (B, seq.shape[1] - start)
                )
                hook = model._make_hook(pool, positions, False, 0, None)
                x, _ = model.backbone.trunk(seq, hooks=(hook,))
            else:
                x, _ = model.backbone.trunk(seq)
            logits = model.backbone.head(x[:, -1:, :])
            nxt = logits.data[:, -1, :].argmax(axis=-1)
            if t_first is None:
                t_first = time.perf_counter()
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    t_end = time.perf_counter()
    return t_end - t0, t_first - t0, t_end - t_first


def run_latency(
    model: ReFilterModel,
    data: TaskData,
    examples: list[QAExample],
    methods: tuple[str, ...] = ("srag", "refilter"),
    batch_sizes: tuple[int, ...] = (1, 4, 8, 16, 32, 64),
    trials: int = 20,
    warmup: int = 3,
    gen_len: int = 32,
    k: int = 3,
    out_dir: str | Path | None = None,
) -> list[LatencyReport]:
    """Wall-clock comparison of batched generation.

    Trials are interleaved round-robin across (method, batch size) cells so
    slow machine-load drift hits every cell equally; medians are reported.
    """
    vocab = data.vocab
    cells: dict[tuple[str, int], dict] = {}
    cache = FeatureCache(
        model.encoder.stamp(), model.encoder.config.d_model, model.encoder.config.chunk_len
    )
    for method in methods:
        for bs in batch_sizes:
            picked = [examples[i % len(examples)] for i in range(bs)]
            chunk_lists = [data.retrieve_chunks(e.question, k) for e in picked]
            if method == "srag":
                prompts = [
                    srag_prompt(vocab, cl, e.question)[0]
                    for cl, e in zip(chunk_lists, picked)
                ]
            else:
                prompts = [question_prompt(vocab, e.question) for e in picked]
            length = max(len(p) for p in prompts)
            if any(len(p) != length for p in prompts):
                raise ConfigError("latency prompts must share one length per cell")
            cells[(method, bs)] = {
                "prompt": np.asarray(prompts, dtype=np.intp),
                "chunks": chunk_lists,
                "walls": [], "ttfts": [], "steady": [],
            }
    for trial in range(warmup + trials):
        for (method, bs), cell in cells.items():
            wall, ttft, steady = _timed_generate(
                model, data, method, cell["prompt"], cell["chunks"], gen_len, cache
            )
            if trial >= warmup:
                cell["walls"].append(wall)
                cell["ttfts"].append(ttft)
                cell["steady"].append(steady)
    reports = []
    for (method, bs), cell in cells.items():
        per_query = np.asarray(cell["walls"]) / bs
        steady = np.asarray(cell["steady"])
        reports.append(
            LatencyReport(
                method=method,
                batch_size=bs,
                prompt_tokens=int(cell["prompt"].shape[1]),
                wall_per_query_mean=float(per_query.mean()),
                wall_per_query_p50=float(np.percentile(per_query, 50)),
                wall_per_query_p90=float(np.percentile(per_query, 90)),
                ttft=float(np.median(cell["ttfts"])),
                tokens_per_second=float(np.median(bs * (gen_len - 1) / steady)),
                trials=trials,
            )
        )
    if out_dir:
        write_summary_csv([asdict(r) for r in reports], Path(out_dir) / "latency_summary.csv")
    return reports


# -- token-weight export --------------------------------------------------------------


def export_weights(
    model: ReFilterModel,
    data: TaskData,
    example: QAExample,
    out_path: str | Path,
    k: int = 3,
) -> list[dict]:
    """Dump per-slot (gamma, mu, W_t) for one query, with gold markers."""
    from .fusion import FusionDiagnostics

    chunks = data.retrieve_chunks(example.question, k)
    pool = build_pool([chunks], model.encoder, model.projector, pad_id=data.vocab.pad_id)
    prompt = np.asarray([question_prompt(data.vocab, example.question)], dtype=np.intp)
    diag = FusionDiagnostics()
    model.generate(prompt, pool, max_new=4, eos_id=data.vocab.eos_id, collect=diag)
    layers = sorted(diag.weights)
    gamma = np.mean([diag.weights[l].gamma for l in layers], axis=0)[0]
    mu = np.mean([diag.weights[l].mu for l in layers], axis=0)
    w_t = np.mean([diag.weights[l].w_t for l in layers], axis=0)[0]
    gold = set(example.gold_chunk_ids)
    answer_ids = set(data.vocab.encode(example.answers[0]))
    s = pool.s
    records = []
    for j in range(pool.n_slots):
        token_id = int(pool.token_ids[0, j])
        records.append(
            {
                "slot": j,
                "chunk_id": str(pool.chunk_ids[0, j]),
                "offset": j % s,
                "token": data.vocab.id_to_token[token_id],
                "gamma": float(gamma[j]),
                "mu": float(mu[j]),
                "weight": float(w_t[j]),
                "is_pad": bool(pool.pad_flags[0, j]),
                "is_noise": bool(pool.noise_flags[0, j]),
                "is_gold_chunk": str(pool.chunk_ids[0, j]) in gold,
                "is_answer_token": token_id in answer_ids,
            }
        )
    write_weight_dump(out_path, records)
    return records


# -- full per-seed experiment -----------------------------------------------------------


def run_seed_experiment(
    cfg: TrainConfig,
    out_dir: str | Path,
    k_values: tuple[int, ...] = (1, 3, 5, 8),
    synth_overrides: dict | None = None,
    eval_dev: bool = True,
) -> dict:
    """Generate a world, train both stages, run the full evaluation suite.

    Returns (and writes) a summary with everything the acceptance criteria
    compare: clean metrics, noise drops, shuffle deltas, the decoupling
    table, gate means by origin, and the answer-weight fraction.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth_cfg = SynthConfig(seed=cfg.seed, chunk_len=cfg.chunk_len, **(synth_overrides or {}))
    world = generate_world(synth_cfg)
    data = TaskData(world, cfg)
    model, train_result, frozen = train_pipeline(cfg, data, out, eval_dev=eval_dev)
    test = data.test_examples

    clean = {
        method: evaluate_method(
            model, data, test, method=method, k=cfg.k, run_seed=cfg.seed,
            max_new=4, collect_gates=(method == "refilter"),
        )
        for method in ("vanilla", "srag", "refilter")
    }
    noise = run_noise(
        model, data, test, fractions=(0.33, 0.66), k=cfg.k,
        run_seed=cfg.seed, out_dir=out,
    )
    shuffle = run_shuffle(model, data, test, k=cfg.k, run_seed=cfg.seed, out_dir=out)
    decoupling = run_decoupling(
        model, data, test, k_values=k_values, run_seed=cfg.seed, out_dir=out
    )
    gate_noise = [
        noise["refilter"][f].gate_stats for f in (0.33, 0.66)
        if noise["refilter"][f].gate_stats is not None
    ]
    clean_stats = clean["refilter"].gate_stats
    summary = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "backbone_frozen_names": len(frozen),
        "best_dev": train_result.best_dev,
        "clean": {m: clean[m].aggregate for m in clean},
        "recall_at_k": clean["refilter"].recall,
        "noise": {
            m: {f: noise[m][f].aggregate for f in (0.33, 0.66)} for m in noise
        },
        "noise_drop_066": {
            m: clean[m].aggregate - noise[m][0.66].aggregate for m in noise
        },
        "gate_mean_noise": float(np.mean([g.mean_gate_noise for g in gate_noise])),
        "gate_mean_gold": float(np.mean([g.mean_gate_gold for g in gate_noise])),
        "shuffle_delta": {m: shuffle[m]["mean_abs_delta"] for m in shuffle},
        "decoupling": decoupling,
        "answer_above_fraction": (
            clean_stats.answer_above_fraction() if clean_stats else 0.0
        ),
    }
    with open(out / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    export_weights(model, data, test[0], out / f"weights_refilter_clean_seed{cfg.seed}.jsonl", k=cfg.k)
    return summary


# -- sweeps ------------------------------------------------------------------------------


def run_fusion_depth_ablation(
    base_cfg: TrainConfig,
    depths: tuple[int, ...] = (1, 3, 5),
    out_dir: str | Path = "ablation",
    synth_overrides: dict | None = None,
) -> list[dict]:
    """Train and evaluate one model per fusion depth; emit a comparison table.

    The backbone must be at least max(depths) layers deep. No ordering is
    asserted: which depth wins is backbone-dependent.
    """
    if base_cfg.n_layers < max(depths):
        raise ConfigError(
            f"fusion depths {depths} need n_layers >= {max(depths)}, "
            f"got {base_cfg.n_layers}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth_cfg = SynthConfig(
        seed=base_cfg.seed, chunk_len=base_cfg.chunk_len, **(synth_overrides or {})
    )
    world = generate_world(synth_cfg)
    rows = []
    for depth in depths:
        cfg = replace(base_cfg, fusion_depth=depth)
        data = TaskData(world, cfg)
        model, result, _ = train_pipeline(cfg, data, out / f"depth{depth}", eval_dev=False)
        rep = evaluate_method(
            model, data, data.test_examples, method="refilter", k=cfg.k,
            run_seed=cfg.seed, max_new=4,
        )
        rows.append(
            {
                "fusion_depth": depth,
                "fusion_layers": str(model.config.fusion_layers),
                "test_em": rep.aggregate,
                "seed": cfg.seed,
            }
        )
    write_summary_csv(rows, out / "fusion_depth_summary.csv")
    return rows


def run_lambda_tune(
    base_cfg: TrainConfig,
    lambdas: tuple[float, ...] = (0.0, 0.001, 0.01, 0.1),
    out_dir: str | Path = "tune",
    synth_overrides: dict | None = None,
) -> list[dict]:
    """Sweep the sparsity weight; emit dev/test metrics and mean gates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    synth_cfg = SynthConfig(
        seed=base_cfg.seed, chunk_len=base_cfg.chunk_len, **(synth_overrides or {})
    )
    world = generate_world(synth_cfg)
    rows = []
    for lam in lambdas:
        cfg = replace(base_cfg, lambda_gate=lam)
        data = TaskData(world, cfg)
        model, result, _ = train_pipeline(cfg, data, out / f"lambda{lam}", eval_dev=False)
        rep = evaluate_method(
            model, data, data.test_examples, method="refilter", k=cfg.k,
            run_seed=cfg.seed, max_new=4, collect_gates=True,
        )
        rows.append(
            {
                "lambda": lam,
                "test_em": rep.aggregate,
                "mean_gate_gold": rep.gate_stats.mean_gate_gold if rep.gate_stats else 0.0,
                "seed": cfg.seed,
            }
        )
    write_summary_csv(rows, out / "lambda_summary.csv")
    return rows

"""Single multi-command entry point.

Commands compose into the full pipeline:

    refilter synth -> index -> cache -> train -> eval -> bench -> visualize

Configuration resolves defaults <- config file (JSON) <- command-line
flags; every command echoes the resolved configuration and seed into its
output directory so any artifact can be reproduced exactly. The
REFILTER_OUT environment variable overrides the default output root.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .context_encoder import FeatureCache
from .errors import (
    CacheError,
    CheckpointError,
    ConfigError,
    DataError,
    DimensionError,
    NumericsError,
    TrainingError,
)
from .evaluation import evaluate_method, write_report_jsonl, write_summary_csv
from .experiments import (
    export_weights,
    run_decoupling,
    run_fusion_depth_ablation,
    run_lambda_tune,
    run_latency,
    run_noise,
    run_shuffle,
)
from .retriever import save_index
from .synth import SynthConfig, generate_world, load_world, save_world
from .training import (
    TaskData,
    TrainConfig,
    build_model,
    load_checkpoint,
    read_checkpoint,
    train_pipeline,
    train_stage,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _out_root() -> Path:
    return Path(os.environ.get("REFILTER_OUT", "runs"))


def _resolve_config(args) -> TrainConfig:
    """defaults <- config file <- flags."""
    values = TrainConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            loaded = json.load(f)
        unknown = set(loaded) - set(values)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        values.update(loaded)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        values["k"] = args.k
    if getattr(args, "chunk_len", None) is not None:
        values["chunk_len"] = args.chunk_len
    if getattr(args, "lambda_gate", None) is not None:
        values["lambda_gate"] = args.lambda_gate
    if getattr(args, "fusion_layers", None) is not None:
        values["fusion_depth"] = _parse_fusion_layers(args.fusion_layers)
    return TrainConfig.from_dict(values)


def _parse_fusion_layers(text: str):
    """'last3' means the last three layers; '2,3,4' means those layers."""
    text = text.strip()
    if text.startswith("last"):
        return int(text[4:] or 1)
    return [int(x) for x in text.split(",")]


def _echo_config(out: Path, command: str, cfg: TrainConfig | None, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict() if cfg else None,
    }
    with open(out / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_task(args, cfg: TrainConfig) -> TaskData:
    world = load_world(Path(args.data) / "world.json")
    return TaskData(world, cfg)


def _load_model(args, cfg: TrainConfig, data: TaskData):
    model = build_model(cfg, len(data.vocab), cfg.seed)
    load_checkpoint(args.checkpoint, model)
    return model


def _model_config_from_checkpoint(path: str) -> TrainConfig:
    header, _ = read_checkpoint(path)
    return TrainConfig.from_dict(header["config"])


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or _out_root() / "synth")
    synth_cfg = SynthConfig(
        seed=cfg.seed,
        chunk_len=cfg.chunk_len,
        n_train=args.n_train,
        n_test=args.n_test,
    )
    world = generate_world(synth_cfg)
    paths = save_world(world, out)
    _echo_config(out, "synth", cfg, args)
    print(f"wrote {len(world.documents)} docs, {len(world.facts)} QA pairs -> {out}")
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = _resolve_config(args)
    data = _load_task(args, cfg)
    out = Path(args.out or _out_root() / "index")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bm25.idx"
    save_index(data.index, path)
    _echo_config(out, "index", cfg, args)
    print(f"indexed {data.index.n_chunks} chunks -> {path}")
    return EXIT_OK


def cmd_cache(args) -> int:
    cfg = _model_config_from_checkpoint(args.checkpoint)
    data = _load_task(args, cfg)
    model = _load_model(args, cfg, data)
    out = Path(args.out or _out_root() / "cache")
    out.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache(
        model.encoder.stamp(), model.encoder.config.d_model, model.encoder.config.chunk_len
    )
    from .numerics import no_grad

    ids = np.asarray([c.token_ids for c in data.chunks], dtype=np.intp)
    with no_grad():
        for lo in range(0, len(ids), 256):
            feats = model.encoder.encode(ids[lo : lo + 256]).data
            for row, chunk in enumerate(data.chunks[lo : lo + 256]):
                cache.put(chunk.chunk_id, feats[row])
    path = out / "features.cache"
    cache.save(path)
    _echo_config(out, "cache", cfg, args)
    print(f"cached {len(cache)} chunk features -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data = _load_task(args, cfg)
    out = Path(args.out or _out_root() / "train")
    _echo_config(out, "train", cfg, args)
    if args.stage == "both":
        model, result, _ = train_pipeline(
            cfg, data, out, backbone_checkpoint=args.backbone_checkpoint
        )
    else:
        model = build_model(cfg, len(data.vocab), cfg.seed)
        if args.backbone_checkpoint:
            load_checkpoint(args.backbone_checkpoint, model)
        result = train_stage(cfg, data, model, args.stage, out)
    print(
        f"trained stage={args.stage} steps={result.global_step} "
        f"best_dev={result.best_dev:.3f} -> {result.checkpoint}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _model_config_from_checkpoint(args.checkpoint)
    data = _load_task(args, cfg)
    model = _load_model(args, cfg, data)
    out = Path(args.out or _out_root() / "eval")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "eval", cfg, args)
    run_seed = args.seed if args.seed is not None else cfg.seed
    test = data.test_examples
    if args.experiment == "clean":
        rows = []
        for method in ("vanilla", "srag", "refilter"):
            rep = evaluate_method(
                model, data, test, method=method, k=args.k or cfg.k,
                noise_fraction=args.noise_fraction, shuffle=args.shuffle,
                run_seed=run_seed, max_new=4,
            )
            write_report_jsonl(rep, out / f"clean_{method}_seed{run_seed}.jsonl")
            rows.append({"method": method, "metric": rep.aggregate, "recall": rep.recall})
            print(f"{method:9s} em={rep.aggregate:.3f} recall={rep.recall}")
        write_summary_csv(rows, out / f"clean_summary_seed{run_seed}.csv")
    elif args.experiment == "noise":
        reports = run_noise(model, data, test, k=args.k or cfg.k, run_seed=run_seed, out_dir=out)
        for method, per in reports.items():
            for f, rep in per.items():
                print(f"{method:9s} fraction={f:.2f} em={rep.aggregate:.3f}")
    elif args.experiment == "shuffle":
        results = run_shuffle(model, data, test, k=args.k or cfg.k, run_seed=run_seed, out_dir=out)
        for method, r in results.items():
            print(
                f"{method:9s} in_order={r['in_order'].aggregate:.3f} "
                f"shuffled={r['shuffled'].aggregate:.3f} |delta|={r['mean_abs_delta']:.3f}"
            )
    elif args.experiment == "decoupling":
        rows = run_decoupling(model, data, test, run_seed=run_seed, out_dir=out)
        for row in rows:
            print(row)
    else:
        raise ConfigError(f"unknown experiment '{args.experiment}'")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _model_config_from_checkpoint(args.checkpoint)
    data = _load_task(args, cfg)
    model = _load_model(args, cfg, data)
    out = Path(args.out or _out_root() / "bench")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "bench", cfg, args)
    batch_sizes = tuple(int(x) for x in args.batch_sizes.split(","))
    reports = run_latency(
        model, data, data.test_examples, batch_sizes=batch_sizes,
        trials=args.trials, gen_len=args.gen_len, k=cfg.k, out_dir=out,
    )
    for r in sorted(reports, key=lambda r: (r.method, r.batch_size)):
        print(
            f"{r.method:9s} batch={r.batch_size:3d} prompt={r.prompt_tokens:4d} "
            f"per-query p50={r.wall_per_query_p50 * 1e3:8.2f} ms "
            f"ttft={r.ttft * 1e3:8.2f} ms tok/s={r.tokens_per_second:8.1f}"
        )
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _model_config_from_checkpoint(args.checkpoint)
    data = _load_task(args, cfg)
    model = _load_model(args, cfg, data)
    out = Path(args.out or _out_root() / "visualize")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "visualize", cfg, args)
    example = data.test_examples[args.query_index]
    path = out / f"weights_query{args.query_index}.jsonl"
    records = export_weights(model, data, example, path, k=cfg.k)
    print(f"dumped {len(records)} token records for '{example.question}' -> {path}")
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or _out_root() / "tune")
    _echo_config(out, "tune", cfg, args)
    if args.sweep == "lambda":
        rows = run_lambda_tune(cfg, out_dir=out)
    elif args.sweep == "fusion-depth":
        rows = run_fusion_depth_ablation(cfg, out_dir=out)
    else:
        raise ConfigError(f"unknown sweep '{args.sweep}'")
    for row in rows:
        print(row)
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="JSON config file with TrainConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--chunk-len", dest="chunk_len", type=int)
    p.add_argument("--lambda", dest="lambda_gate", type=float)
    p.add_argument("--fusion-layers", dest="fusion_layers", help="'lastN' or e.g. '2,3,4'")
    p.add_argument("--out", help="output directory (default under REFILTER_OUT)")
    if data:
        p.add_argument("--data", required=True, help="directory from `refilter synth`")


def build_parser() -> _Parser:
    parser = _Parser(prog="refilter", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate corpus, QA, and noise pool")
    _add_common(p, data=False)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=200)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("index", help="build and persist the BM25 index")
    _add_common(p)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("cache", help="precompute chunk features")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_cache)

    p = sub.add_parser("train", help="train the backbone and/or the filter")
    _add_common(p)
    p.add_argument("--stage", choices=("backbone", "refilter", "both"), default="both")
    p.add_argument("--backbone-checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation experiment")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--experiment", default="clean",
        choices=("clean", "noise", "shuffle", "decoupling"),
    )
    p.add_argument("--noise-fraction", dest="noise_fraction", type=float, default=0.0)
    p.add_argument("--shuffle", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="batched latency comparison")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-sizes", dest="batch_sizes", default="1,4,8,16,32,64")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--gen-len", dest="gen_len", type=int, default=32)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("visualize", help="export token weights for one query")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query-index", dest="query_index", type=int, default=0)
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("tune", help="sweep lambda or fusion depth")
    _add_common(p)
    p.add_argument("--sweep", choices=("lambda", "fusion-depth"), default="lambda")
    p.set_defaults(fn=cmd_tune)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DimensionError) as exc:
        print(f"refilter: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CacheError, CheckpointError, FileNotFoundError) as exc:
        print(f"refilter: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericsError, TrainingError) as exc:
        print(f"refilter: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

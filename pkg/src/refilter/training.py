"""Teacher-forced training with parameter freezing, scheduling, checkpoints.

Two stages share one loop:

  backbone   trains the toy LM on a mixture of question-only QA and
             synthetic retrieve-then-read (copy) sequences. This stands in
             for the pretrained instruction LLM the fusion method assumes:
             it learns the answer format and how to copy a fact out of a
             prompt, but cannot know held-out test facts.
  refilter   freezes every backbone parameter and fine-tunes the context
             encoder, projection, gates, position mask, alpha, and the
             aggregation layer-norm affine against NLL + lambda * gate
             sparsity.

Runs are pure functions of (config, seed): batch order and dropout masks
derive from the seed and the step counters, so a checkpoint resume
reproduces the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig
from .context_encoder import ContextEncoder, EncoderConfig, Projector, build_pool
from .corpus import Chunk, QAExample, Vocabulary, build_vocab, chunk_document
from .errors import CheckpointError, ConfigError, TrainingError
from .fusion import FusionConfig, ReFilterModel, resolve_fusion_layers
from .numerics import AdamW, Tensor, clip_grad_norm, cross_entropy, set_trainable, zero_grads
from .prompts import (
    IGNORE,
    TeacherSequence,
    answer_ids,
    batch_arrays,
    question_prompt,
    srag_prompt,
    teacher_sequence,
)
from .retriever import InvertedIndex, RetrievalResult, build_index, search
from .seeding import derive_seed, make_rng
from .synth import World, make_benign_block, make_decoy_block, make_gold_block

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"RFCKPT1\x00"


@dataclass
class TrainConfig:
    """Every knob of a run; serialized verbatim into output artifacts."""

    seed: int = 0
    # model dimensions
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 192
    d_e: int = 32
    enc_layers: int = 2
    enc_heads: int = 2
    vocab_size: int = 2048
    # retrieval / fusion
    k: int = 3
    chunk_len: int = 16
    fusion_depth: int = 1
    lambda_gate: float = 0.003
    dropout_p: float = 0.1
    recompute_each_step: bool = True
    mu_decay: float = 0.3  # decoupled decay of the position mask toward 1
    # optimization (paper-scale recipes target billion-parameter backbones;
    # the toy model needs a larger rate and more passes, set by pilot runs)
    epochs: int = 32
    batch_size: int = 16
    lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    dev_frac: float = 0.1
    # backbone pretraining mixture
    pretrain_epochs: int = 4
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32
    n_copy: int = 3000
    max_answer_tokens: int = 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    nll: float
    gate: float
    total: float
    mean_gate: float


# -- task data -----------------------------------------------------------------


class TaskData:
    """Vocabulary, chunked corpus, BM25 index, noise pool, and QA splits."""

    def __init__(self, world: World, cfg: TrainConfig):
        if world.config.chunk_len != cfg.chunk_len:
            raise ConfigError(
                f"world chunk_len {world.config.chunk_len} != config {cfg.chunk_len}"
            )
        self.world = world
        self.cfg = cfg
        self.vocab: Vocabulary = build_vocab(world.all_texts(), max_size=cfg.vocab_size)
        self.chunks: list[Chunk] = []
        for doc_id, text in world.documents:
            self.chunks.extend(chunk_document(doc_id, text, cfg.chunk_len, self.vocab))
        self.chunk_by_id = {c.chunk_id: c for c in self.chunks}
        self.index: InvertedIndex = build_index(self.chunks)
        self.noise_chunks: list[Chunk] = []
        for doc_id, text in world.noise_documents:
            self.noise_chunks.extend(
                chunk_document(doc_id, text, cfg.chunk_len, self.vocab, is_noise=True)
            )
        examples = world.qa_examples()
        train_all = [e for e in examples if e.split == "train"]
        self.test_examples = [e for e in examples if e.split == "test"]
        order = make_rng("dev-split", cfg.seed).permutation(len(train_all))
        n_dev = max(1, int(round(cfg.dev_frac * len(train_all))))
        dev_idx = set(order[:n_dev].tolist())
        self.dev_examples = [train_all[i] for i in sorted(dev_idx)]
        self.train_examples = [
            train_all[i] for i in range(len(train_all)) if i not in dev_idx
        ]
        self._retrieval: dict[tuple[str, int], RetrievalResult] = {}

    def retrieval_result(self, question: str, k: int) -> RetrievalResult:
        key = (question, k)
        if key not in self._retrieval:
            self._retrieval[key] = search(self.index, question, k)
        return self._retrieval[key]

    def retrieve_chunks(self, question: str, k: int) -> list[Chunk]:
        return [self.chunk_by_id[cid] for cid in self.retrieval_result(question, k).chunk_ids]


def build_model(cfg: TrainConfig, vocab_size: int, seed: int) -> ReFilterModel:
    backbone = Backbone(
        BackboneConfig(
            vocab_size=vocab_size,
            d_model=cfg.d_model,
            n_layers=cfg.n_layers,
            n_heads=cfg.n_heads,
            d_ff=cfg.d_ff,
            max_positions=cfg.max_positions,
        ),
        seed=derive_seed(seed, "backbone"),
    )
    encoder = ContextEncoder(
        EncoderConfig(
            vocab_size=vocab_size,
            d_model=cfg.d_e,
            n_layers=cfg.enc_layers,
            n_heads=cfg.enc_heads,
            chunk_len=cfg.chunk_len,
        ),
        seed=derive_seed(seed, "encoder"),
    )
    projector = Projector(cfg.d_e, cfg.d_model, seed=derive_seed(seed, "proj"))
    fusion_cfg = FusionConfig(
        fusion_layers=resolve_fusion_layers(cfg.fusion_depth, cfg.n_layers),
        k=cfg.k,
        s=cfg.chunk_len,
        lambda_gate=cfg.lambda_gate,
        dropout_p=cfg.dropout_p,
        recompute_each_step=cfg.recompute_each_step,
    )
    return ReFilterModel(backbone, encoder, projector, fusion_cfg, seed=derive_seed(seed, "fusion"))


# -- prepared batches ------------------------------------------------------------


@dataclass
class PreparedExample:
    sequence: TeacherSequence
    chunk_lists: list[Chunk] | None  # retrieval pool for fusion, None for plain LM


def prepare_refilter_example(
    example: QAExample, data: TaskData, cfg: TrainConfig
) -> PreparedExample | None:
    answer = example.answers[0]
    ans = answer_ids(data.vocab, answer)
    if len(ans) <= 1:  # answer tokenized to nothing
        return None
    prompt = question_prompt(data.vocab, example.question)
    return PreparedExample(
        sequence=teacher_sequence(prompt, ans),
        chunk_lists=data.retrieve_chunks(example.question, cfg.k),
    )


def _pretrain_sequences(data: TaskData, cfg: TrainConfig) -> list[PreparedExample]:
    """Backbone-stage mixture, built entirely from counterfactual triples.

    Copy sequences pair a random (entity, relation, value) context with the
    matching question, so the answer is only predictable by reading the
    prompt; question-only sequences teach the answer format with
    irreducible uncertainty over values. No real fact ever appears, so the
    backbone cannot memorize the QA task and the later filter stage keeps
    its full learning signal.
    """
    world = data.world
    vocab = data.vocab
    s = cfg.chunk_len
    filler = world.filler_words
    out: list[PreparedExample] = []

    def chunk_of(tokens: list[str], cid: str) -> Chunk:
        return Chunk(
            chunk_id=cid,
            doc_id=cid,
            text=" ".join(tokens),
            token_ids=tuple(vocab.encode_tokens(tokens)),
        )

    for i in range(cfg.n_copy):
        rng = make_rng("pretrain-copy", cfg.seed, i)
        ent = world.entities[int(rng.integers(len(world.entities)))]
        rel = world.relations[int(rng.integers(len(world.relations)))]
        val = world.values[int(rng.integers(len(world.values)))]
        gold = make_gold_block(rng, rel, ent, val, s, filler)
        distractors = []
        for _ in range(cfg.k - 1):
            kind = rng.random()
            if kind < 0.5:
                ent2 = world.entities[int(rng.integers(len(world.entities)))]
                rel2 = world.relations[int(rng.integers(len(world.relations)))]
                val2 = world.values[int(rng.integers(len(world.values)))]
                distractors.append(make_gold_block(rng, rel2, ent2, val2, s, filler))
            elif kind < 0.75:
                distractors.append(make_decoy_block(rng, rel, ent, s, filler))
            else:
                distractors.append(make_benign_block(rng, ent, s, filler))
        # Top-ranked position usually holds the evidence, as with BM25; the
        # resulting position prior is what order-shuffle evaluation probes.
        slot = 0 if rng.random() < 0.6 else int(rng.integers(1, cfg.k))
        blocks = distractors[:slot] + [gold] + distractors[slot:]
        chunks = [chunk_of(b, f"cf{i:05d}#{j:04d}") for j, b in enumerate(blocks)]
        prompt, _ = srag_prompt(vocab, chunks, f"what is the {rel} of {ent}")
        out.append(
            PreparedExample(teacher_sequence(prompt, answer_ids(vocab, val)), None)
        )

    n_format = max(200, len(data.train_examples))
    for i in range(n_format):
        rng = make_rng("pretrain-format", cfg.seed, i)
        ent = world.entities[int(rng.integers(len(world.entities)))]
        rel = world.relations[int(rng.integers(len(world.relations)))]
        val = world.values[int(rng.integers(len(world.values)))]
        qp = question_prompt(vocab, f"what is the {rel} of {ent}")
        out.append(PreparedExample(teacher_sequence(qp, answer_ids(vocab, val)), None))
    return out


def _batches_by_length(
    examples: list[PreparedExample], batch_size: int, rng: np.random.Generator
) -> list[list[PreparedExample]]:
    """Shuffle, group by sequence length, emit fixed-size batches."""
    order = rng.permutation(len(examples))
    buckets: dict[int, list[PreparedExample]] = {}
    for i in order:
        ex = examples[int(i)]
        buckets.setdefault(len(ex.sequence.inputs), []).append(ex)
    batches = []
    for length in sorted(buckets):
        bucket = buckets[length]
        for lo in range(0, len(bucket), batch_size):
            batches.append(bucket[lo : lo + batch_size])
    batch_order = rng.permutation(len(batches))
    return [batches[int(i)] for i in batch_order]


# -- loss ------------------------------------------------------------------------


def compute_loss(
    model: ReFilterModel,
    batch: list[PreparedExample],
    cfg: TrainConfig,
    data: TaskData,
    training: bool,
    step_seed: int,
) -> tuple[Tensor, LossBreakdown]:
    """NLL over answer tokens plus lambda * mean dynamic gate.

    Logits are computed only at the supervised positions (the head is
    per-position, so this changes nothing but the cost).
    """
    inputs, targets, positions = batch_arrays([ex.sequence for ex in batch])
    rows = np.arange(inputs.shape[0])[:, None]
    target_at = targets[rows, positions]  # (B, M), all supervised
    with_pool = batch[0].chunk_lists is not None
    if with_pool:
        pool = build_pool(
            [ex.chunk_lists for ex in batch],
            model.encoder,
            model.projector,
            pad_id=data.vocab.pad_id,
        )
        logits, _, diag = model.fused_forward(
            inputs, pool, positions, training=training, seed=step_seed,
            logits_positions=positions,
        )
        nll = cross_entropy(logits, target_at, ignore_index=IGNORE)
        gate = diag.sparsity_loss()
        total = nll + cfg.lambda_gate * gate
        breakdown = LossBreakdown(
            nll=float(nll.data),
            gate=float(gate.data),
            total=float(total.data),
            mean_gate=diag.mean_gate(),
        )
    else:
        logits, _, _ = model.fused_forward(
            inputs, None, None, logits_positions=positions
        )
        nll = cross_entropy(logits, target_at, ignore_index=IGNORE)
        total = nll
        breakdown = LossBreakdown(
            nll=float(nll.data), gate=0.0, total=float(total.data), mean_gate=0.0
        )
    return total, breakdown


# -- checkpoints -------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model: ReFilterModel,
    optimizer: AdamW | None,
    cfg: TrainConfig,
    stage: str,
    epoch: int,
    global_step: int,
    extra: dict | None = None,
) -> None:
    tensors: dict[str, np.ndarray] = {
        f"param.{name}": p.data for name, p in model.params.items()
    }
    opt_state = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for name, arr in state["m"].items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in state["v"].items():
            tensors[f"adam.v.{name}"] = arr
        opt_state = {k: state[k] for k in (
            "step_count", "lr", "total_steps", "warmup_frac",
            "beta1", "beta2", "eps", "weight_decay",
        )}
    names = sorted(tensors)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "stage": stage,
        "epoch": epoch,
        "global_step": global_step,
        "optimizer": opt_state,
        "trainable": {name: p.trainable for name, p in model.params.items()},
        "rng_states": {
            "scheme": "derived",
            "seed": cfg.seed,
            "stage": stage,
            "epoch": epoch,
            "global_step": global_step,
        },
        "tensors": [[n, list(tensors[n].shape)] for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(8) != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors: dict[str, np.ndarray] = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor '{name}'")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return header, tensors


def load_checkpoint(
    path: str | Path,
    model: ReFilterModel,
    optimizer: AdamW | None = None,
    only_prefixes: tuple[str, ...] | None = None,
) -> dict:
    """Restore parameters (and optimizer state) in place; returns the header.

    ``only_prefixes`` restricts the restore (e.g. ``("backbone.",)`` when
    warm-starting the filter stage from a backbone checkpoint).
    """
    header, tensors = read_checkpoint(path)
    for name, p in model.params.items():
        if only_prefixes and not any(name.startswith(pre) for pre in only_prefixes):
            continue
        key = f"param.{name}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing parameter '{name}'")
        if tensors[key].shape != p.data.shape:
            raise CheckpointError(
                f"parameter '{name}' has shape {tuple(tensors[key].shape)} in the "
                f"checkpoint but {p.data.shape} in the model"
            )
        p.data[...] = tensors[key]
    if optimizer is not None:
        opt = header.get("optimizer")
        if opt is None:
            raise CheckpointError("checkpoint carries no optimizer state")
        missing = [n for n in optimizer.m if f"adam.m.{n}" not in tensors]
        if missing:
            raise CheckpointError(
                f"checkpoint optimizer state missing '{missing[0]}' "
                "(saved from a different stage or trainable set)"
            )
        state = dict(opt)
        state["m"] = {name: tensors[f"adam.m.{name}"] for name in optimizer.m}
        state["v"] = {name: tensors[f"adam.v.{name}"] for name in optimizer.v}
        optimizer.load_state_dict(state)
    return header


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    best_checkpoint: Path | None
    metrics: list[dict]
    best_dev: float
    global_step: int


def _dev_exact_match(model: ReFilterModel, data: TaskData, cfg: TrainConfig, stage: str) -> float:
    from .evaluation import evaluate_method  # late import to keep layering one-way

    method = "refilter" if stage == "refilter" else "srag"
    report = evaluate_method(
        model, data, data.dev_examples, method=method, k=cfg.k, metric="em"
    )
    return report.aggregate


def train_stage(
    cfg: TrainConfig,
    data: TaskData,
    model: ReFilterModel,
    stage: str,
    out_dir: str | Path,
    stop_after_steps: int | None = None,
    resume_from: str | Path | None = None,
    eval_dev: bool = True,
) -> TrainResult:
    """Run one stage to completion (or ``stop_after_steps``), checkpointing.

    Aborts with a diagnostic dump if the loss goes non-finite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "backbone":
        examples = _pretrain_sequences(data, cfg)
        epochs, lr = cfg.pretrain_epochs, cfg.pretrain_lr
        batch_size = cfg.pretrain_batch_size
        set_trainable(model.params, ("backbone.",), True)
        set_trainable(model.params, ("encoder.", "proj.", "filter.", "fusion."), False)
    elif stage == "refilter":
        examples = [
            ex
            for ex in (
                prepare_refilter_example(e, data, cfg) for e in data.train_examples
            )
            if ex is not None
        ]
        skipped = len(data.train_examples) - len(examples)
        if skipped:
            print(f"[train] skipped {skipped} examples with empty answers")
        epochs, lr = cfg.epochs, cfg.lr
        batch_size = cfg.batch_size
        set_trainable(model.params, ("backbone.",), False)
        set_trainable(model.params, ("encoder.", "proj.", "filter.", "fusion."), True)
    else:
        raise ConfigError(f"unknown stage '{stage}'")

    steps_per_epoch = max(1, int(np.ceil(len(examples) / batch_size)))
    total_steps = steps_per_epoch * epochs
    # The position mask is a multiplier initialized at 1; its decay pulls
    # toward that neutral value rather than toward 0.
    decay_overrides = {
        mask.mu.name: (cfg.mu_decay, 1.0) for mask in model.masks.values()
    }
    optimizer = AdamW(
        model.params,
        lr=lr,
        total_steps=total_steps,
        warmup_frac=cfg.warmup_frac,
        weight_decay=cfg.weight_decay,
        decay_overrides=decay_overrides,
    )
    start_step = 0
    if resume_from is not None:
        header = load_checkpoint(resume_from, model, optimizer)
        if header["stage"] != stage:
            raise CheckpointError(
                f"checkpoint stage '{header['stage']}' does not match '{stage}'"
            )
        start_step = int(header["global_step"])

    metrics: list[dict] = []
    metrics_path = out / f"metrics_{stage}.jsonl"
    mode = "a" if resume_from is not None else "w"
    best_dev = -1.0
    best_path: Path | None = None
    global_step = 0
    done = False
    with open(metrics_path, mode, encoding="utf-8") as log:
        for epoch in range(1, epochs + 1):
            rng = make_rng("order", cfg.seed, stage, epoch)
            batches = _batches_by_length(examples, batch_size, rng)
            for batch in batches:
                global_step += 1
                if global_step <= start_step:
                    continue
                zero_grads(model.params)
                step_seed = derive_seed(cfg.seed, stage, "step", global_step)
                total, breakdown = compute_loss(
                    model, batch, cfg, data, training=True, step_seed=step_seed
                )
                if not np.isfinite(breakdown.total):
                    dump = out / f"bad_batch_step{global_step}.json"
                    with open(dump, "w", encoding="utf-8") as f:
                        json.dump(
                            {
                                "step": global_step,
                                "loss": breakdown.total,
                                "inputs": [ex.sequence.inputs for ex in batch],
                            },
                            f,
                        )
                    raise TrainingError(
                        f"non-finite loss {breakdown.total} at step {global_step}; "
                        f"batch dumped to {dump}"
                    )
                total.backward()
                clip_grad_norm(model.params, cfg.clip_norm)
                lr_t = optimizer.step()
                row = {
                    "step": global_step,
                    "epoch": epoch,
                    "nll": breakdown.nll,
                    "gate": breakdown.gate,
                    "total": breakdown.total,
                    "mean_gate": breakdown.mean_gate,
                    "lr": lr_t,
                }
                metrics.append(row)
                log.write(json.dumps(row) + "\n")
                if stop_after_steps is not None and global_step >= stop_after_steps:
                    done = True
                    break
            if done:
                break
            if eval_dev and global_step > start_step:
                dev = _dev_exact_match(model, data, cfg, stage)
                row = {"step": global_step, "epoch": epoch, "dev_metric": dev}
                metrics.append(row)
                log.write(json.dumps(row) + "\n")
                if dev > best_dev:
                    best_dev = dev
                    best_path = out / f"best_{stage}.ckpt"
                    save_checkpoint(
                        best_path, model, optimizer, cfg, stage, epoch, global_step
                    )
    final = out / f"last_{stage}.ckpt"
    save_checkpoint(final, model, optimizer, cfg, stage, epochs, global_step)
    return TrainResult(
        checkpoint=final,
        best_checkpoint=best_path,
        metrics=metrics,
        best_dev=best_dev,
        global_step=global_step,
    )


def train_pipeline(
    cfg: TrainConfig,
    data: TaskData,
    out_dir: str | Path,
    backbone_checkpoint: str | Path | None = None,
    eval_dev: bool = True,
) -> tuple[ReFilterModel, TrainResult, dict[str, np.ndarray]]:
    """Backbone stage (unless a checkpoint is supplied), then filter stage.

    Returns the trained model, the filter-stage result, and a snapshot of
    the backbone parameters taken at freeze time (for the freeze contract).
    """
    model = build_model(cfg, len(data.vocab), cfg.seed)
    out = Path(out_dir)
    if backbone_checkpoint is not None:
        load_checkpoint(backbone_checkpoint, model, only_prefixes=("backbone.",))
    else:
        train_stage(cfg, data, model, "backbone", out, eval_dev=eval_dev)
    frozen = {
        name: p.data.copy()
        for name, p in model.params.items()
        if name.startswith("backbone.")
    }
    result = train_stage(cfg, data, model, "refilter", out, eval_dev=eval_dev)
    return model, result, frozen

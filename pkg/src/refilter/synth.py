"""Synthetic planted-fact world: corpus, QA pairs, and a noise pool.

Facts are (entity, relation, value) triples. Each fact's document plants
the sentence "the <relation> of <entity> is <value>" inside one
chunk-aligned block, so gold chunk ids are known exactly at generation
time. Every block is exactly chunk_len tokens, which makes chunk
boundaries coincide with block boundaries.

Rank engineering: every block contains "the", "of" and "is" exactly once,
so those terms carry ~zero idf and contribute equally to every chunk.
Rank order for a question about (relation, entity) is then fully
determined:

  decoy blocks (entity twice + relation once)  >  gold block
  gold block (entity + relation + value)       >  benign blocks
  benign blocks (entity once)                  >  same-relation chunks

so a fact with d decoys has its gold chunk at rank exactly d + 1. The
decoy-count distribution below makes dataset recall strictly increase
over k in {1, 3, 5, 8}. Values are shared between train and test facts;
entities are disjoint, so a model without retrieval cannot answer test
questions.

The noise pool is a disjoint-topic word-salad corpus with its own
vocabulary; noise chunks never carry gold evidence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import QAExample, save_dataset, save_documents
from .errors import ConfigError
from .seeding import make_rng

RELATION_WORDS = (
    "capital", "color", "leader", "founder", "currency", "language",
    "animal", "mineral", "river", "festival", "export", "climate",
    "anthem", "emblem", "harvest", "dialect",
)

FILLER_WORDS = (
    "report", "study", "group", "record", "survey", "note", "letter",
    "paper", "book", "page", "item", "list", "table", "figure", "chart",
    "entry", "docket", "bureau", "office", "council", "board", "panel",
    "review", "summary", "draft", "memo", "file", "folder", "index",
    "volume", "series", "section", "chapter", "annex", "appendix",
    "bulletin", "gazette", "journal", "ledger", "register", "roster",
    "catalog", "digest", "manual", "handbook", "guide", "notice",
    "circular", "briefing", "dossier",
)

NOISE_WORDS = (
    "serum", "plasma", "dosage", "enzyme", "lesion", "biopsy", "suture",
    "splint", "gauze", "lancet", "tracer", "isotope", "reagent", "titer",
    "assay", "culture", "specimen", "membrane", "cortex", "neuron",
    "axon", "synapse", "vesicle", "peptide", "lipid", "glucose",
    "insulin", "hormone", "antigen", "antibody", "vaccine", "pathogen",
    "microbe", "spore", "fungus", "toxin", "venom", "sepsis", "fever",
    "tremor", "spasm", "reflex", "pulse", "artery", "vein", "capillary",
    "marrow", "tendon", "ligament", "cartilage",
)

STOPWORDS = ("the", "of", "is")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    """Pronounceable unique tokens like 'vardok' or 'melu'."""
    words: list[str] = []
    while len(words) < count:
        n_syl = int(rng.integers(2, 4))
        w = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))]
            + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syl)
        )
        if int(rng.integers(2)):
            w += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 500
    n_test: int = 200
    n_relations: int = 12
    n_values: int = 60
    chunk_len: int = 16
    n_noise_docs: int = 60
    decoy_counts: tuple[int, ...] = (0, 1, 2, 3, 4, 6, 7)
    decoy_probs: tuple[float, ...] = (0.45, 0.15, 0.15, 0.08, 0.07, 0.05, 0.05)

    def __post_init__(self):
        if self.chunk_len < 10:
            raise ConfigError("chunk_len must be >= 10 to hold a fact plus padding")
        if self.n_relations > len(RELATION_WORDS):
            raise ConfigError(f"at most {len(RELATION_WORDS)} relations available")
        if abs(sum(self.decoy_probs) - 1.0) > 1e-9:
            raise ConfigError("decoy_probs must sum to 1")


@dataclass
class Fact:
    entity: str
    relation: str
    value: str
    split: str
    gold_chunk_id: str = ""
    n_decoys: int = 0

    @property
    def question(self) -> str:
        return f"what is the {self.relation} of {self.entity}"


@dataclass
class World:
    config: SynthConfig
    facts: list[Fact]
    documents: list[tuple[str, str]]
    noise_documents: list[tuple[str, str]]
    entities: list[str]
    relations: list[str]
    values: list[str]
    filler_words: list[str]

    @property
    def train_facts(self) -> list[Fact]:
        return [f for f in self.facts if f.split == "train"]

    @property
    def test_facts(self) -> list[Fact]:
        return [f for f in self.facts if f.split == "test"]

    def qa_examples(self) -> list[QAExample]:
        return [
            QAExample(
                question=f.question,
                answers=(f.value,),
                gold_chunk_ids=(f.gold_chunk_id,),
                split=f.split,
            )
            for f in self.facts
        ]

    def all_texts(self) -> list[str]:
        """Everything the vocabulary must cover (corpus, noise, QA, templates)."""
        texts = [text for _, text in self.documents]
        texts += [text for _, text in self.noise_documents]
        texts += [f.question for f in self.facts]
        texts += [" ".join(self.values), "context question answer"]
        return texts


def _pad_block(
    content: list[str], s: int, rng: np.random.Generator, filler: list[str],
    add_stopwords: bool,
) -> list[str]:
    """Extend content to exactly s tokens with filler.

    When ``add_stopwords`` is set, one each of the/of/is is placed at
    random filler positions so every block carries identical stopword
    counts (their idf is then negligible and rank order is exact).
    """
    need = s - len(content)
    pad = [filler[int(i)] for i in rng.integers(len(filler), size=need)]
    if add_stopwords:
        slots = rng.choice(need, size=len(STOPWORDS), replace=False)
        for word, slot in zip(STOPWORDS, slots):
            pad[int(slot)] = word
    return content + pad


def make_gold_block(
    rng: np.random.Generator, relation: str, entity: str, value: str,
    s: int, filler: list[str],
) -> list[str]:
    """Fact sentence plus filler; the/of/is appear once via the sentence."""
    return _pad_block(
        ["the", relation, "of", entity, "is", value], s, rng, filler,
        add_stopwords=False,
    )


def make_decoy_block(
    rng: np.random.Generator, relation: str, entity: str, s: int, filler: list[str]
) -> list[str]:
    """Entity twice + relation once: outranks the gold block under BM25."""
    w = filler[int(rng.integers(len(filler)))]
    return _pad_block([entity, relation, w, entity], s, rng, filler, add_stopwords=True)


def make_benign_block(
    rng: np.random.Generator, entity: str, s: int, filler: list[str]
) -> list[str]:
    """Entity once, no relation: ranks between the gold block and the rest."""
    w = filler[int(rng.integers(len(filler)))]
    return _pad_block([entity, w], s, rng, filler, add_stopwords=True)


def make_filler_block(rng: np.random.Generator, s: int, filler: list[str]) -> list[str]:
    return _pad_block([], s, rng, filler, add_stopwords=True)


def generate_world(cfg: SynthConfig) -> World:
    rng = make_rng("synth", cfg.seed)
    taken = set(RELATION_WORDS) | set(FILLER_WORDS) | set(NOISE_WORDS) | set(STOPWORDS)
    taken.update({"what", "context", "question", "answer"})
    n_facts = cfg.n_train + cfg.n_test
    entities = _pseudo_words(rng, n_facts, taken)
    values = _pseudo_words(rng, cfg.n_values, taken)
    relations = list(RELATION_WORDS[: cfg.n_relations])
    filler = list(FILLER_WORDS)
    s = cfg.chunk_len

    facts: list[Fact] = []
    for i, entity in enumerate(entities):
        facts.append(
            Fact(
                entity=entity,
                relation=relations[int(rng.integers(len(relations)))],
                value=values[int(rng.integers(len(values)))],
                split="train" if i < cfg.n_train else "test",
                n_decoys=int(
                    rng.choice(cfg.decoy_counts, p=np.asarray(cfg.decoy_probs))
                ),
            )
        )

    documents: list[tuple[str, str]] = []
    decoy_blocks: list[list[str]] = []
    for i, fact in enumerate(facts):
        gold = make_gold_block(rng, fact.relation, fact.entity, fact.value, s, filler)
        # Benign entity mentions fill the ranks below the gold chunk, so
        # deep retrieval (k up to 8) pulls in harmless context rather than
        # conflicting same-relation facts.
        benigns = [
            make_benign_block(rng, fact.entity, s, filler) for _ in range(7)
        ]
        fill = make_filler_block(rng, s, filler)
        blocks = [gold, benigns[0], benigns[1], fill]
        order = rng.permutation(len(blocks))
        doc_id = f"doc{i:04d}"
        gold_ordinal = int(np.where(order == 0)[0][0])
        fact.gold_chunk_id = f"{doc_id}#{gold_ordinal:04d}"
        text = " ".join(" ".join(blocks[int(j)]) for j in order)
        documents.append((doc_id, text))
        documents.append(
            (f"ext{i:04d}", " ".join(" ".join(b) for b in benigns[2:]))
        )
        for _ in range(fact.n_decoys):
            decoy_blocks.append(
                make_decoy_block(rng, fact.relation, fact.entity, s, filler)
            )

    for i in range(0, len(decoy_blocks), 4):
        group = decoy_blocks[i : i + 4]
        documents.append(
            (f"dec{i // 4:04d}", " ".join(" ".join(b) for b in group))
        )

    noise_documents: list[tuple[str, str]] = []
    noise_vocab = list(NOISE_WORDS)
    for i in range(cfg.n_noise_docs):
        blocks = [
            [noise_vocab[int(j)] for j in rng.integers(len(noise_vocab), size=s)]
            for _ in range(4)
        ]
        noise_documents.append(
            (f"noise{i:04d}", " ".join(" ".join(b) for b in blocks))
        )

    return World(
        config=cfg,
        facts=facts,
        documents=documents,
        noise_documents=noise_documents,
        entities=entities,
        relations=relations,
        values=values,
        filler_words=filler,
    )


# -- persistence ---------------------------------------------------------------


def save_world(world: World, out_dir: str | Path) -> dict[str, Path]:
    """Write corpus.jsonl, qa.jsonl, noise.jsonl, world.json into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "qa": out / "qa.jsonl",
        "noise": out / "noise.jsonl",
        "world": out / "world.json",
    }
    save_documents(paths["corpus"], world.documents)
    save_dataset(paths["qa"], world.qa_examples())
    save_documents(paths["noise"], world.noise_documents)
    meta = {
        "config": {
            "seed": world.config.seed,
            "n_train": world.config.n_train,
            "n_test": world.config.n_test,
            "n_relations": world.config.n_relations,
            "n_values": world.config.n_values,
            "chunk_len": world.config.chunk_len,
            "n_noise_docs": world.config.n_noise_docs,
            "decoy_counts": list(world.config.decoy_counts),
            "decoy_probs": list(world.config.decoy_probs),
        },
        "entities": world.entities,
        "relations": world.relations,
        "values": world.values,
        "filler_words": world.filler_words,
        "facts": [
            {
                "entity": f.entity,
                "relation": f.relation,
                "value": f.value,
                "split": f.split,
                "gold_chunk_id": f.gold_chunk_id,
                "n_decoys": f.n_decoys,
            }
            for f in world.facts
        ],
    }
    with open(paths["world"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return paths


def load_world(path: str | Path) -> World:
    with open(path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = SynthConfig(
        **{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in meta["config"].items()
        }
    )
    facts = [Fact(**f) for f in meta["facts"]]
    world_dir = Path(path).parent
    from .corpus import load_documents

    return World(
        config=cfg,
        facts=facts,
        documents=load_documents(world_dir / "corpus.jsonl"),
        noise_documents=load_documents(world_dir / "noise.jsonl"),
        entities=meta["entities"],
        relations=meta["relations"],
        values=meta["values"],
        filler_words=meta["filler_words"],
    )

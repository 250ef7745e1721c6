"""Deterministic synthetic datasets for tests and smoke runs.

The main generator emits a knowledge graph with the same shape as the UMLS
benchmark split (135 entities, 46 relations, 5216/652/661 facts) but with
fully synthetic, learnable structure: entities belong to 9 groups of 15 and
carry one of 3 features; each relation links a source group to a target
group and half of the relations additionally require the feature to match.
Descriptions spell the rule out in plain tokens, so a small encoder can
learn it from text alone.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Fact, KnowledgeGraph

GROUPS = ["alpha", "beta", "gamma", "delta", "epsilon",
          "zeta", "eta", "theta", "iota"]
FEATURES = ["red", "green", "blue"]

N_GROUPS = len(GROUPS)
GROUP_SIZE = 15
N_ENTITIES = N_GROUPS * GROUP_SIZE
N_RELATIONS = 46
SPLIT_SIZES = {"train": 5216, "dev": 652, "test": 661}


def _entity_meta(i: int) -> tuple[int, int]:
    return i // GROUP_SIZE, (i % GROUP_SIZE) % len(FEATURES)


def _relation_meta(seed: int):
    """(src_group, dst_group, needs_feature_match) per relation, src != dst."""
    rng = np.random.default_rng(seed)
    meta = []
    for j in range(N_RELATIONS):
        src = int(rng.integers(N_GROUPS))
        dst = int(rng.integers(N_GROUPS))
        while dst == src:
            dst = int(rng.integers(N_GROUPS))
        meta.append((src, dst, j % 2 == 0))
    return meta


def _true_facts(meta) -> list[tuple[int, int, int]]:
    facts = []
    for j, (src, dst, match) in enumerate(meta):
        heads = range(src * GROUP_SIZE, (src + 1) * GROUP_SIZE)
        tails = range(dst * GROUP_SIZE, (dst + 1) * GROUP_SIZE)
        for h in heads:
            for t in tails:
                if match and _entity_meta(h)[1] != _entity_meta(t)[1]:
                    continue
                facts.append((h, j, t))
    return facts


def synth_kg(seed: int = 7, tc: bool = False) -> KnowledgeGraph:
    """Build the synthetic UMLS-shaped KG in memory.

    With tc=True the dev/test splits carry 0/1 labels: even positions keep
    the true fact, odd positions get a tail corrupted to break the rule.
    """
    meta = _relation_meta(seed)
    truths = _true_facts(meta)
    need = sum(SPLIT_SIZES.values())
    assert len(truths) >= need, (len(truths), need)
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(len(truths))
    picked = [truths[i] for i in order[:need]]
    splits_raw = {
        "train": picked[:SPLIT_SIZES["train"]],
        "dev": picked[SPLIT_SIZES["train"]:SPLIT_SIZES["train"] + SPLIT_SIZES["dev"]],
        "test": picked[SPLIT_SIZES["train"] + SPLIT_SIZES["dev"]:],
    }

    truth_set = set(truths)
    def corrupt_tail(h, r, t):
        while True:
            t2 = int(rng.integers(N_ENTITIES))
            if (h, r, t2) not in truth_set:
                return h, r, t2

    splits: dict[str, list[Fact]] = {"train": [Fact(*f) for f in splits_raw["train"]]}
    for name in ("dev", "test"):
        out = []
        for i, (h, r, t) in enumerate(splits_raw[name]):
            if not tc:
                out.append(Fact(h, r, t))
            elif i % 2 == 0:
                out.append(Fact(h, r, t, label=True))
            else:
                out.append(Fact(*corrupt_tail(h, r, t), label=False))
        splits[name] = out

    ent_ids = [f"ent{i:03d}" for i in range(N_ENTITIES)]
    ent_text = []
    for i in range(N_ENTITIES):
        g, f = _entity_meta(i)
        ent_text.append(f"{GROUPS[g]} {FEATURES[f]} item{i:03d}")
    rel_ids = [f"rel{j:02d}" for j in range(N_RELATIONS)]
    rel_text = [f"r{j:02d} {GROUPS[src]} {GROUPS[dst]} "
                f"{'matching' if match else 'any'}"
                for j, (src, dst, match) in enumerate(meta)]
    return KnowledgeGraph(ent_ids, ent_text, rel_ids, rel_text, splits)


def write_kg(kg: KnowledgeGraph, directory) -> Path:
    """Serialize a KG to the five-file TSV layout load_kg expects."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, facts in kg.splits.items():
        lines = [kg.fact_to_tsv(f) for f in facts]
        (directory / f"{name}.tsv").write_text("".join(l + "\n" for l in lines),
                                               encoding="utf-8")
    pairs = zip(("entity2text.tsv", "relation2text.tsv"),
                ((kg.entity_ids, kg.entity_text), (kg.relation_ids, kg.relation_text)))
    for fname, (ids, texts) in pairs:
        body = "".join(f"{i}\t{t}\n" for i, t in zip(ids, texts))
        (directory / fname).write_text(body, encoding="utf-8")
    return directory


def random_kg(rng: np.random.Generator, n_entities: int = 12,
              n_relations: int = 3, n_facts: int = 40) -> KnowledgeGraph:
    """Small random KG for oracle cross-checks; facts are distinct triples."""
    n_facts = min(n_facts, n_entities * n_relations * n_entities)
    keys = set()
    while len(keys) < n_facts:
        keys.add((int(rng.integers(n_entities)), int(rng.integers(n_relations)),
                  int(rng.integers(n_entities))))
    facts = [Fact(*k) for k in sorted(keys)]
    order = rng.permutation(len(facts))
    facts = [facts[i] for i in order]
    n_train = max(1, int(0.7 * len(facts)))
    n_dev = (len(facts) - n_train) // 2
    splits = {"train": facts[:n_train],
              "dev": facts[n_train:n_train + n_dev],
              "test": facts[n_train + n_dev:]}
    ent_ids = [f"e{i}" for i in range(n_entities)]
    ent_text = [f"node {i:02d}" for i in range(n_entities)]
    rel_ids = [f"r{j}" for j in range(n_relations)]
    rel_text = [f"edge kind {j:02d}" for j in range(n_relations)]
    return KnowledgeGraph(ent_ids, ent_text, rel_ids, rel_text, splits)


def tiny_kg(train, dev=(), test=(), entities=None, relations=None) -> KnowledgeGraph:
    """Hand-rolled KG from string triples, for worked examples in tests."""
    def collect():
        ents, rels = [], []
        for split in (train, dev, test):
            for item in split:
                h, r, t = item[:3]
                for e in (h, t):
                    if e not in ents:
                        ents.append(e)
                if r not in rels:
                    rels.append(r)
        return ents, rels

    auto_e, auto_r = collect()
    entities = list(entities) if entities is not None else auto_e
    relations = list(relations) if relations is not None else auto_r
    e_idx = {e: i for i, e in enumerate(entities)}
    r_idx = {r: i for i, r in enumerate(relations)}

    def conv(split):
        out = []
        for item in split:
            h, r, t = item[:3]
            label = item[3] if len(item) > 3 else None
            out.append(Fact(e_idx[h], r_idx[r], e_idx[t], label))
        return out

    return KnowledgeGraph(entities, [f"thing {e}" for e in entities],
                          relations, [f"link {r}" for r in relations],
                          {"train": conv(train), "dev": conv(dev),
                           "test": conv(test)})

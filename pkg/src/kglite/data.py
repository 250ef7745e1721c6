"""Dataset ingestion, vocabulary, cloze construction, negative sampling.

A dataset directory holds five UTF-8 TSV files: train.tsv / dev.tsv /
test.tsv (head TAB relation TAB tail, optional fourth 0/1 label column)
plus entity2text.tsv and relation2text.tsv (id TAB description). Ids are
opaque strings in files and dense ints in memory.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

_WORD_RE = re.compile(r"[a-z0-9]+")

PAD, UNK, CLS, SEP = 0, 1, 2, 3
_SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"]

HEAD, RELATION, TAIL = "head", "relation", "tail"


class DatasetError(ValueError):
    pass


class Fact(NamedTuple):
    head: int
    relation: int
    tail: int
    label: Optional[bool] = None

    def key(self):
        return (self.head, self.relation, self.tail)


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    """Split on whitespace and punctuation boundaries; keeps [a-z0-9] runs."""
    if lowercase:
        text = text.lower()
    return _WORD_RE.findall(text)


class Tokenizer:
    """Corpus vocabulary plus special and reserved prompt-slot ids.

    Reserved ids ([PAD]/[UNK]/[CLS]/[SEP] and the prompt slots) are never
    produced by text tokenization.
    """

    def __init__(self, tokens, n_prompt_slots: int = 0, lowercase: bool = True):
        self.lowercase = lowercase
        self.n_prompt_slots = int(n_prompt_slots)
        self._prompt_base = len(_SPECIALS)
        vocab = list(_SPECIALS)
        vocab += [f"<prompt{i}>" for i in range(self.n_prompt_slots)]
        self._text_base = len(vocab)
        seen = dict.fromkeys(tokens)
        vocab += sorted(seen)
        self.id_to_token = vocab
        self.token_to_id = {t: i for i, t in enumerate(vocab)}

    def __len__(self):
        return len(self.id_to_token)

    def prompt_id(self, slot: int) -> int:
        if not 0 <= slot < self.n_prompt_slots:
            raise IndexError(f"prompt slot {slot} out of range [0, {self.n_prompt_slots})")
        return self._prompt_base + slot

    def is_prompt_id(self, tok_id: int) -> bool:
        return self._prompt_base <= tok_id < self._text_base

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, UNK) for w in tokenize(text, self.lowercase)]


@dataclass
class KnowledgeGraph:
    entity_ids: list[str]
    entity_text: list[str]
    relation_ids: list[str]
    relation_text: list[str]
    splits: dict[str, list[Fact]]
    entity_index: dict[str, int] = field(init=False)
    relation_index: dict[str, int] = field(init=False)
    all_facts: set = field(init=False)
    train_facts: set = field(init=False)
    known_tails: dict = field(init=False)
    known_heads: dict = field(init=False)

    def __post_init__(self):
        self.entity_index = {e: i for i, e in enumerate(self.entity_ids)}
        self.relation_index = {r: i for i, r in enumerate(self.relation_ids)}
        self.all_facts = {f.key() for split in self.splits.values() for f in split}
        self.train_facts = {f.key() for f in self.splits["train"]}
        self.known_tails = {}
        self.known_heads = {}
        for h, r, t in self.all_facts:
            self.known_tails.setdefault((h, r), set()).add(t)
            self.known_heads.setdefault((r, t), set()).add(h)

    @property
    def n_entities(self):
        return len(self.entity_ids)

    @property
    def n_relations(self):
        return len(self.relation_ids)

    def fact_to_tsv(self, fact: Fact) -> str:
        line = "\t".join((self.entity_ids[fact.head], self.relation_ids[fact.relation],
                          self.entity_ids[fact.tail]))
        if fact.label is not None:
            line += "\t" + ("1" if fact.label else "0")
        return line

    def corpus_tokens(self, lowercase: bool = True):
        for text in self.entity_text:
            yield from tokenize(text, lowercase)
        for text in self.relation_text:
            yield from tokenize(text, lowercase)


def _read_text_map(path: Path) -> tuple[list[str], list[str]]:
    ids, texts, seen = [], [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 tab-separated fields, "
                                   f"got {len(parts)}")
            if parts[0] in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate id '{parts[0]}'")
            seen.add(parts[0])
            ids.append(parts[0])
            texts.append(parts[1])
    return ids, texts


def _read_split(path: Path, ent_index, rel_index) -> list[Fact]:
    facts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DatasetError(f"{path}:{lineno}: expected 3 or 4 tab-separated "
                                   f"fields, got {len(parts)}")
            h, r, t = parts[:3]
            for name, index, kind in ((h, ent_index, "entity"), (r, rel_index, "relation"),
                                      (t, ent_index, "entity")):
                if name not in index:
                    raise DatasetError(f"{path}:{lineno}: unknown {kind} id '{name}'")
            label = None
            if len(parts) == 4:
                if parts[3] not in ("0", "1"):
                    raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, "
                                       f"got '{parts[3]}'")
                label = parts[3] == "1"
            facts.append(Fact(ent_index[h], rel_index[r], ent_index[t], label))
    return facts


def load_kg(directory) -> KnowledgeGraph:
    directory = Path(directory)
    for fname in ("train.tsv", "dev.tsv", "test.tsv", "entity2text.tsv",
                  "relation2text.tsv"):
        if not (directory / fname).exists():
            raise DatasetError(f"missing dataset file: {directory / fname}")
    ent_ids, ent_text = _read_text_map(directory / "entity2text.tsv")
    rel_ids, rel_text = _read_text_map(directory / "relation2text.tsv")
    ent_index = {e: i for i, e in enumerate(ent_ids)}
    rel_index = {r: i for i, r in enumerate(rel_ids)}
    splits = {name: _read_split(directory / f"{name}.tsv", ent_index, rel_index)
              for name in ("train", "dev", "test")}
    return KnowledgeGraph(ent_ids, ent_text, rel_ids, rel_text, splits)


def build_tokenizer(kg: KnowledgeGraph, n_prompt_slots: int = 0,
                    lowercase: bool = True) -> Tokenizer:
    return Tokenizer(kg.corpus_tokens(lowercase), n_prompt_slots, lowercase)


@dataclass(frozen=True)
class ClozeInput:
    """Sentence-pair encoding of one fact.

    token_ids: [CLS] head-desc relation-desc [SEP] tail-desc [SEP] (+prompts)
    segment_ids: 0 through the first [SEP], 1 afterwards
    prompt_slots: per-position prompt slot index, -1 at text positions
    """

    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    prompt_slots: tuple[int, ...]
    fact: Fact

    def __len__(self):
        return len(self.token_ids)


def build_cloze(fact: Fact, kg: KnowledgeGraph, tokenizer: Tokenizer,
                max_len: int, encoded=None) -> ClozeInput:
    """Render a fact as the two-sentence cloze statement.

    Over-long inputs lose head tokens first, then tail tokens; relation
    tokens are never cut. Emptying any section is an error. `encoded`
    optionally supplies pre-tokenized (head, relation, tail) id lists.
    """
    if encoded is not None:
        head, rel, tail = (list(encoded[0]), list(encoded[1]), list(encoded[2]))
    else:
        head = tokenizer.encode(kg.entity_text[fact.head])
        rel = tokenizer.encode(kg.relation_text[fact.relation])
        tail = tokenizer.encode(kg.entity_text[fact.tail])
    if not head or not rel or not tail:
        which = "head" if not head else ("relation" if not rel else "tail")
        raise DatasetError(f"empty {which} description for fact "
                           f"{kg.fact_to_tsv(fact)!r}")
    budget = max_len - 3
    overflow = len(head) + len(rel) + len(tail) - budget
    if overflow > 0:
        cut = min(overflow, len(head) - 1)
        if cut > 0:
            head = head[:len(head) - cut]
            overflow -= cut
    if overflow > 0:
        cut = min(overflow, len(tail) - 1)
        if cut > 0:
            tail = tail[:len(tail) - cut]
            overflow -= cut
    if overflow > 0:
        raise DatasetError(f"cloze for fact {kg.fact_to_tsv(fact)!r} cannot fit in "
                           f"{max_len} tokens")
    ids = [CLS, *head, *rel, SEP, *tail, SEP]
    n_a = 2 + len(head) + len(rel)
    segs = [0] * n_a + [1] * (len(tail) + 1)
    return ClozeInput(tuple(ids), tuple(segs), tuple([-1] * len(ids)), fact)


class PromptPattern(NamedTuple):
    """Prompt token counts at the three insertion points.

    x1 go right after [CLS], x2 right after the relation tokens (before the
    first [SEP]), x3 right after the tail tokens (before the final [SEP]).
    """

    x1: int
    x2: int
    x3: int

    @property
    def total(self):
        return self.x1 + self.x2 + self.x3

    @classmethod
    def parse(cls, spec: str) -> "PromptPattern":
        parts = spec.split("-")
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ValueError(f"prompt pattern must look like '2-0-0', got {spec!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.x1}-{self.x2}-{self.x3}"


def insert_prompts(cloze: ClozeInput, pattern: PromptPattern,
                   tokenizer: Tokenizer, max_seq_len: int) -> ClozeInput:
    """Splice reserved prompt tokens into a cloze at the three fixed points."""
    if pattern.total == 0:
        return cloze
    if pattern.total != tokenizer.n_prompt_slots:
        raise ValueError(f"pattern {pattern} needs {pattern.total} prompt slots, "
                         f"tokenizer reserves {tokenizer.n_prompt_slots}")
    if len(cloze) + pattern.total > max_seq_len:
        raise DatasetError(f"prompted cloze length {len(cloze) + pattern.total} "
                           f"exceeds max_seq_len {max_seq_len}")
    ids = list(cloze.token_ids)
    first_sep = ids.index(SEP)
    last_sep = len(ids) - 1
    # insertion points, applied back to front so indexes stay valid
    points = [(1, 0, pattern.x1), (first_sep, pattern.x1, pattern.x2),
              (last_sep, pattern.x1 + pattern.x2, pattern.x3)]
    segs = list(cloze.segment_ids)
    slots = list(cloze.prompt_slots)
    for pos, slot0, count in reversed(points):
        seg = segs[pos] if pos < last_sep else 1
        ids[pos:pos] = [tokenizer.prompt_id(slot0 + k) for k in range(count)]
        segs[pos:pos] = [seg] * count
        slots[pos:pos] = list(range(slot0, slot0 + count))
    return ClozeInput(tuple(ids), tuple(segs), tuple(slots), cloze.fact)


def corrupt(fact: Fact, slot: str, replacement: int) -> Fact:
    if slot == HEAD:
        return Fact(replacement, fact.relation, fact.tail)
    if slot == RELATION:
        return Fact(fact.head, replacement, fact.tail)
    if slot == TAIL:
        return Fact(fact.head, fact.relation, replacement)
    raise ValueError(f"unknown slot {slot!r}")


def sample_negatives(fact: Fact, slot: str, n: int, rng: np.random.Generator,
                     kg: KnowledgeGraph) -> list[Fact]:
    """Draw n corrupted facts for one slot, re-sampling any in-train hit.

    The candidate pool excludes the fact's own id for that slot. Gives up
    after 100*n attempts and returns fewer, with a warning.
    """
    if n == 0:
        return []
    original = getattr(fact, slot)
    pool = (kg.n_relations if slot == RELATION else kg.n_entities) - 1
    if pool <= 0:
        raise DatasetError(f"empty candidate pool for slot {slot!r}")
    out = []
    attempts = 0
    limit = 100 * n
    while len(out) < n and attempts < limit:
        attempts += 1
        draw = int(rng.integers(pool))
        if draw >= original:
            draw += 1
        candidate = corrupt(fact, slot, draw)
        if candidate.key() in kg.train_facts:
            continue
        out.append(candidate)
    if len(out) < n:
        warnings.warn(f"sample_negatives: only {len(out)}/{n} negatives for slot "
                      f"{slot!r} after {limit} attempts", RuntimeWarning)
    return out

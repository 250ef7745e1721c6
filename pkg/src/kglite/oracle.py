"""Brute-force cross-checks for ranking and loss, kept deliberately naive.

Nothing here shares logic with evaluation.py or training.py beyond the Fact
type: membership sets are rebuilt from the raw splits, ranks are counted
with explicit loops, and the loss replayer is plain math.log arithmetic.
"""

from __future__ import annotations

import math

from .data import Fact, KnowledgeGraph


def oracle_ranks(kg: KnowledgeGraph, split: str, score_fn) -> list[tuple]:
    """(fact key, slot, rank) for every fact in the split, both entity slots.

    Full enumeration: every entity is considered, a corruption is dropped
    only if the corrupted triple occurs somewhere in train/dev/test, and the
    tie rule is mid-rank.
    """
    known = set()
    for facts in kg.splits.values():
        for f in facts:
            known.add((f.head, f.relation, f.tail))

    out = []
    for fact in kg.splits[split]:
        for slot in ("head", "tail"):
            gold = fact.head if slot == "head" else fact.tail
            queries = []
            for e in range(kg.n_entities):
                if slot == "head":
                    triple = (e, fact.relation, fact.tail)
                else:
                    triple = (fact.head, fact.relation, e)
                if e != gold and triple in known:
                    continue
                queries.append((e, Fact(*triple)))
            scores = list(score_fn([q[1] for q in queries]))
            gold_score = None
            for (e, _), s in zip(queries, scores):
                if e == gold:
                    gold_score = float(s)
            greater = 0
            equal = 0
            for (e, _), s in zip(queries, scores):
                if e == gold:
                    continue
                if float(s) > gold_score:
                    greater += 1
                elif float(s) == gold_score:
                    equal += 1
            out.append((fact.head, fact.relation, fact.tail, slot,
                        1.0 + greater + equal / 2.0))
    return out


def perfect_scorer(kg: KnowledgeGraph):
    """Probability 1 for known facts, 0 otherwise; forces MR = 1 filtered."""
    known = set()
    for facts in kg.splits.values():
        for f in facts:
            known.add((f.head, f.relation, f.tail))

    def score(facts):
        return [1.0 if (f.head, f.relation, f.tail) in known else 0.0
                for f in facts]

    return score


def replay_joint_total(logged_rows, n_slots: int = 3) -> float:
    """Recompute one fact's joint loss from its logged probabilities.

    logged_rows: (slot, is_positive, probability-of-target-class) per scored
    sequence. The positive term is counted once per corrupted slot.
    """
    lo, hi = 1e-12, 1.0 - 1e-12

    def ln(p):
        return math.log(min(max(p, lo), hi))

    pos = [v for _, is_pos, v in logged_rows if is_pos]
    if len(pos) != 1:
        raise ValueError(f"expected exactly one positive row, got {len(pos)}")
    total = -n_slots * ln(pos[0])
    for _, is_pos, v in logged_rows:
        if not is_pos:
            total -= ln(v)
    return total

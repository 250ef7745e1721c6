"""Filtered link-prediction ranking, threshold tuning, report structures.

Ranking uses the fractional (mid-rank) tie convention:
rank = 1 + #{strictly greater} + #{equal, gold excluded} / 2. Candidates
whose corrupted fact appears in any split are removed; the gold entity is
always kept.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import HEAD, TAIL, Fact, KnowledgeGraph, corrupt


@dataclass(frozen=True)
class RankResult:
    fact: tuple[int, int, int]
    slot: str
    gold_score: float
    candidate_count: int
    rank: float


@dataclass
class EvalReport:
    task: str
    results: list = field(default_factory=list)
    mr: float | None = None
    hits10: float | None = None
    accuracy: float | None = None
    dev_accuracy: float | None = None
    threshold: float | None = None
    clamp_count: int = 0
    config: dict = field(default_factory=dict)
    wall_clock: float | None = None

    def to_json_dict(self) -> dict:
        """Serializable form; wall-clock deliberately excluded so reruns of
        the same seed produce identical bytes."""
        doc = {"task": self.task}
        for key in ("mr", "hits10", "accuracy", "dev_accuracy", "threshold"):
            val = getattr(self, key)
            if val is not None:
                doc[key] = val
        doc["clamp_count"] = self.clamp_count
        doc["config"] = self.config
        doc["results"] = self.results
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    def table(self) -> str:
        lines = [f"task: {self.task}"]
        rows = (("MR", self.mr), ("Hits@10", self.hits10),
                ("accuracy", self.accuracy), ("dev accuracy", self.dev_accuracy),
                ("threshold", self.threshold), ("clamp events", self.clamp_count),
                ("wall clock [s]", self.wall_clock))
        for name, val in rows:
            if val is not None:
                shown = f"{val:.4f}" if isinstance(val, float) else str(val)
                lines.append(f"  {name:<16} {shown}")
        lines.append(f"  {'queries':<16} {len(self.results)}")
        return "\n".join(lines)


def filtered_candidates(fact: Fact, slot: str, kg: KnowledgeGraph) -> np.ndarray:
    """Entity ids to rank for one corrupted slot, gold always included."""
    if slot not in (HEAD, TAIL):
        raise ValueError(f"link prediction corrupts head or tail, not {slot!r}")
    gold = fact.head if slot == HEAD else fact.tail
    keep = [gold]
    for e in range(kg.n_entities):
        if e == gold:
            continue
        if corrupt(fact, slot, e).key() not in kg.all_facts:
            keep.append(e)
    keep.sort()
    return np.asarray(keep, dtype=np.int64)


def rank_of_gold(gold_score: float, other_scores: np.ndarray) -> float:
    others = np.asarray(other_scores, dtype=np.float64)
    greater = int((others > gold_score).sum())
    equal = int((others == gold_score).sum())
    return 1.0 + greater + equal / 2.0


def link_prediction_eval(score_fn, kg: KnowledgeGraph, split: str = "test",
                         config: dict | None = None) -> EvalReport:
    """Rank the gold entity against filtered corruptions of each fact.

    score_fn(list of Facts) -> array of fact probabilities. Each test fact
    contributes two queries (head slot, tail slot).
    """
    queries = []
    flat: list[Fact] = []
    for fact in kg.splits[split]:
        for slot in (HEAD, TAIL):
            cands = filtered_candidates(fact, slot, kg)
            queries.append((fact, slot, cands, len(flat)))
            flat.extend(corrupt(fact, slot, int(e)) for e in cands)
    all_scores = np.asarray(score_fn(flat))

    results = []
    for fact, slot, cands, offset in queries:
        gold = fact.head if slot == HEAD else fact.tail
        scores = all_scores[offset:offset + len(cands)]
        gold_pos = int(np.searchsorted(cands, gold))
        gold_score = float(scores[gold_pos])
        rank = rank_of_gold(gold_score, np.delete(scores, gold_pos))
        results.append(RankResult(fact.key(), slot, gold_score,
                                  len(cands), rank))
    ranks = np.array([r.rank for r in results])
    report = EvalReport(task="lp", config=config or {})
    report.results = [
        {"fact": list(r.fact), "slot": r.slot, "gold_score": r.gold_score,
         "candidates": r.candidate_count, "rank": r.rank}
        for r in results
    ]
    report.mr = float(ranks.mean()) if len(ranks) else math.nan
    report.hits10 = float((ranks <= 10).mean()) if len(ranks) else math.nan
    return report


def tune_threshold(scores, labels) -> tuple[float, float]:
    """Best decision threshold for `predict positive iff score > threshold`.

    Sweeps -inf, midpoints of adjacent sorted unique scores, +inf; returns
    (threshold, accuracy); ties go to the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError(f"scores {scores.shape} vs labels {labels.shape}")
    if labels.all() or (~labels).all():
        raise ValueError("threshold tuning needs both classes in dev labels")
    uniq = np.unique(scores)
    candidates = [-math.inf]
    candidates += [float((a + b) / 2.0) for a, b in zip(uniq, uniq[1:])]
    candidates += [math.inf]
    best_thr, best_acc = None, -1.0
    for thr in candidates:
        acc = float(((scores > thr) == labels).mean())
        if acc > best_acc:
            best_thr, best_acc = thr, acc
    return best_thr, best_acc


def triplet_classification_eval(score_fn, kg: KnowledgeGraph,
                                config: dict | None = None) -> EvalReport:
    """Tune the threshold on dev, report accuracy on test."""
    for split in ("dev", "test"):
        if any(f.label is None for f in kg.splits[split]):
            raise ValueError(f"triplet classification needs labels in {split}")
    dev = kg.splits["dev"]
    dev_scores = np.asarray(score_fn(list(dev)))
    dev_labels = np.array([f.label for f in dev], dtype=bool)
    thr, dev_acc = tune_threshold(dev_scores, dev_labels)

    test = kg.splits["test"]
    test_scores = np.asarray(score_fn(list(test)))
    test_labels = np.array([f.label for f in test], dtype=bool)
    correct = (test_scores > thr) == test_labels
    report = EvalReport(task="tc", config=config or {})
    report.threshold = thr
    report.dev_accuracy = dev_acc
    report.accuracy = float(correct.mean())
    report.results = [
        {"fact": list(f.key()), "score": float(s), "label": bool(l),
         "predicted": bool(s > thr)}
        for f, s, l in zip(test, test_scores, test_labels)
    ]
    return report


def recompute_headline(report: EvalReport) -> dict:
    """Re-derive headline metrics from per-query results (self-consistency)."""
    if report.task == "lp":
        ranks = np.array([r["rank"] for r in report.results])
        return {"mr": float(ranks.mean()), "hits10": float((ranks <= 10).mean())}
    correct = [(r["score"] > report.threshold) == r["label"]
               for r in report.results]
    return {"accuracy": float(np.mean(correct))}

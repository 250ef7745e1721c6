"""Negative-sampling loss, batched scoring, and the training loop.

One training example is a fact plus per-slot corruptions. Writing p(f) for
the positive-class probability of the sentence-pair head, the per-slot loss
is -ln p(fact) - sum ln(1 - p(corrupted)); the joint loss sums the slot
losses, so the positive term is counted once per corrupted slot. Batch loss
is the mean of per-fact joint losses.

All sequences of a batch run through the encoder as one padded forward
pass; probabilities are clamped to [1e-12, 1 - 1e-12] before the log.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import (HEAD, PAD, RELATION, TAIL, ClozeInput, Fact, KnowledgeGraph,
                   PromptPattern, Tokenizer, build_cloze, insert_prompts,
                   sample_negatives)
from .encoder import EncoderModel
from .optim import AdamW, clip_grad_norm, lr_at

P_MIN = 1e-12
P_MAX = 1.0 - 1e-12

LP_SLOTS = (HEAD, RELATION, TAIL)
TC_SLOTS = (HEAD, TAIL)


class TrainingAborted(RuntimeError):
    def __init__(self, step, lr, max_grad, detail):
        super().__init__(f"training aborted at step {step} (lr={lr:.3g}, "
                         f"max|grad|={max_grad:.3g}): {detail}")
        self.step = step
        self.lr = lr
        self.max_grad = max_grad


class ClampCounter:
    """Counts probabilities that fell outside the clamping interval."""

    def __init__(self):
        self.count = 0

    def note(self, probs: np.ndarray):
        self.count += int(((probs < P_MIN) | (probs > P_MAX)).sum())


@dataclass
class LossTerms:
    l_head: float
    l_rel: float
    l_tail: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.l_head + self.l_rel + self.l_tail


def slot_loss(pos_prob: float, neg_probs, counter: ClampCounter | None = None) -> float:
    """-ln p(fact) - sum ln p(not-fact) for one slot, scalar form."""
    probs = np.array([pos_prob, *neg_probs], dtype=np.float64)
    if counter is not None:
        counter.note(probs)
    probs = np.clip(probs, P_MIN, P_MAX)
    return float(-np.log(probs).sum())


def pad_batch(clozes: list[ClozeInput]):
    """Stack variable-length clozes into padded (B, L) index arrays."""
    L = max(len(c) for c in clozes)
    B = len(clozes)
    ids = np.full((B, L), PAD, dtype=np.int64)
    segs = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.float64)
    slots = np.full((B, L), -1, dtype=np.int64)
    for i, c in enumerate(clozes):
        n = len(c)
        ids[i, :n] = c.token_ids
        segs[i, :n] = c.segment_ids
        slots[i, :n] = c.prompt_slots
        mask[i, :n] = 1.0
    return ids, segs, mask, slots


@dataclass
class ScoreContext:
    """Everything needed to turn a Fact into a scored cloze."""

    model: EncoderModel
    kg: KnowledgeGraph
    tokenizer: Tokenizer
    pattern: PromptPattern
    max_seq_len: int

    def __post_init__(self):
        enc = self.tokenizer.encode
        self._ent_tokens = [enc(t) for t in self.kg.entity_text]
        self._rel_tokens = [enc(t) for t in self.kg.relation_text]

    def cloze(self, fact: Fact) -> ClozeInput:
        encoded = (self._ent_tokens[fact.head], self._rel_tokens[fact.relation],
                   self._ent_tokens[fact.tail])
        base = build_cloze(fact, self.kg, self.tokenizer,
                           self.max_seq_len - self.pattern.total,
                           encoded=encoded)
        return insert_prompts(base, self.pattern, self.tokenizer, self.max_seq_len)

    def forward_probs(self, clozes: list[ClozeInput], training: bool = False,
                      rng: np.random.Generator | None = None) -> T.Tensor:
        ids, segs, mask, slots = pad_batch(clozes)
        hidden = self.model.encode(ids, segs, attn_mask=mask, prompt_slots=slots,
                                   training=training, rng=rng)
        return self.model.nsp_probability(hidden)

    def score_facts(self, facts: list[Fact], batch_rows: int = 512) -> np.ndarray:
        """p(fact) for each fact; evaluation mode, no tape."""
        out = np.empty(len(facts))
        for lo in range(0, len(facts), batch_rows):
            chunk = facts[lo:lo + batch_rows]
            probs = self.forward_probs([self.cloze(f) for f in chunk])
            out[lo:lo + len(chunk)] = probs.data[:, 0]
        return out

    def scorer(self, batch_rows: int = 512):
        return lambda facts: self.score_facts(facts, batch_rows)


def fact_rows(fact: Fact, kg: KnowledgeGraph, n_ns: int, slots,
              rng: np.random.Generator) -> list[tuple[Fact, str, bool]]:
    """The positive row followed by per-slot negatives, in slot order."""
    rows = [(fact, "pos", True)]
    for slot in slots:
        for neg in sample_negatives(fact, slot, n_ns, rng, kg):
            rows.append((neg, slot, False))
    return rows


def joint_loss(ctx: ScoreContext, facts: list[Fact], n_ns: int,
               neg_rng: np.random.Generator, slots=LP_SLOTS,
               training: bool = False, dropout_rng=None,
               counter: ClampCounter | None = None):
    """Mean per-fact joint loss over a batch, as a differentiable scalar.

    Returns (loss tensor, per-fact LossTerms, per-fact logged target
    probabilities) so an independent pass can recompute the total.
    """
    all_rows = []
    spans = []
    for fact in facts:
        rows = fact_rows(fact, kg=ctx.kg, n_ns=n_ns, slots=slots, rng=neg_rng)
        spans.append((len(all_rows), len(rows)))
        all_rows.extend(rows)

    probs = ctx.forward_probs([ctx.cloze(f) for f, _, _ in all_rows],
                              training=training, rng=dropout_rng)
    n = len(all_rows)
    target_col = np.array([0 if pos else 1 for _, _, pos in all_rows])
    onehot = np.zeros((n, 2))
    onehot[np.arange(n), target_col] = 1.0
    weights = np.array([float(len(slots)) if pos else 1.0
                        for _, _, pos in all_rows]) / len(facts)

    picked = T.matmul(T.mul(probs, T.constant(onehot, "target_onehot")),
                      T.constant(np.ones((2, 1)), "col_sum"))
    clamped = T.clamp(picked, P_MIN, P_MAX)
    loss = T.scale(T.sum_all(T.mul(T.log(clamped),
                                   T.constant(weights[:, None], "row_weights"))),
                   -1.0)

    realized = probs.data[np.arange(n), target_col]
    if counter is not None:
        counter.note(realized)
    terms = []
    logged = []
    for start, count in spans:
        chunk = all_rows[start:start + count]
        vals = realized[start:start + count]
        pos_p = float(vals[0])
        per_slot = {}
        for slot in LP_SLOTS:
            negs = [float(v) for (_, s, _), v in zip(chunk, vals) if s == slot]
            per_slot[slot] = slot_loss(pos_p, negs) if slot in slots else 0.0
        terms.append(LossTerms(per_slot[HEAD], per_slot[RELATION], per_slot[TAIL]))
        logged.append([(s, bool(p), float(v)) for (_, s, p), v in zip(chunk, vals)])
    return loss, terms, logged


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    last_params: dict[str, np.ndarray]
    log: list[dict]
    best_metric: float | None
    best_epoch: int | None
    clamp_count: int
    steps: int


def snapshot_params(model: EncoderModel) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_parameters()}


def restore_params(model: EncoderModel, snap: dict[str, np.ndarray]):
    for name, t in model.named_parameters():
        t.data[...] = snap[name]


def frozen_checksum(model: EncoderModel) -> str:
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        if not t.requires_grad:
            h.update(name.encode())
            h.update(t.data.tobytes())
    return h.hexdigest()


def train(ctx: ScoreContext, *, epochs: int, batch_size: int, lr: float,
          n_ns: int, slots=LP_SLOTS, warmup_ratio: float = 0.1,
          weight_decay: float = 0.01, clip_norm: float = 0.0,
          shuffle_rng: np.random.Generator, neg_rng: np.random.Generator,
          dropout_rng: np.random.Generator | None = None,
          dev_eval_every: int = 0, dev_metric_fn=None,
          max_steps: int | None = None, log_sink=None) -> TrainResult:
    """Run the optimization loop over the train split.

    dev_metric_fn(ctx) -> float is called every dev_eval_every epochs (when
    nonzero); higher is better and selects the best snapshot. Without dev
    evaluation the final parameters are the best ones.

    Raises TrainingAborted on non-finite loss, MissingGradError if a
    trainable parameter receives no gradient, and RuntimeError if a frozen
    parameter drifts.
    """
    model = ctx.model
    trainable = model.trainable_parameters()
    if not trainable:
        raise ValueError("nothing to train: all parameters frozen")
    opt = AdamW(trainable, lr=lr, weight_decay=weight_decay)
    facts = list(ctx.kg.splits["train"])
    steps_per_epoch = max(1, math.ceil(len(facts) / batch_size))
    total_steps = epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    counter = ClampCounter()
    frozen_before = frozen_checksum(model)
    log: list[dict] = []
    best_metric = None
    best_epoch = None
    best = None
    step = 0

    def emit(entry):
        log.append(entry)
        if log_sink is not None:
            log_sink(entry)

    training_mode = dropout_rng is not None and ctx.model.config.dropout > 0
    for epoch in range(epochs):
        if step >= total_steps:
            break
        order = shuffle_rng.permutation(len(facts))
        for lo in range(0, len(facts), batch_size):
            if step >= total_steps:
                break
            batch = [facts[i] for i in order[lo:lo + batch_size]]
            step += 1
            cur_lr = lr_at(step, total_steps, warmup_ratio, lr)
            with T.record() as tape:
                loss, terms, _ = joint_loss(ctx, batch, n_ns, neg_rng,
                                            slots=slots, training=training_mode,
                                            dropout_rng=dropout_rng,
                                            counter=counter)
            loss_val = float(loss.data)
            T.backward(tape, loss)
            max_grad = max((float(np.abs(t.grad).max()) for _, t in trainable
                            if t.grad is not None), default=0.0)
            if not math.isfinite(loss_val):
                raise TrainingAborted(step, cur_lr, max_grad, "non-finite loss")
            if clip_norm > 0:
                clip_grad_norm(trainable, clip_norm)
            opt.step(lr=cur_lr)
            emit({"step": step, "epoch": epoch, "lr": cur_lr,
                  "loss": loss_val,
                  "l_head": sum(t.l_head for t in terms) / len(terms),
                  "l_rel": sum(t.l_rel for t in terms) / len(terms),
                  "l_tail": sum(t.l_tail for t in terms) / len(terms),
                  "clamped": counter.count})
        if frozen_checksum(model) != frozen_before:
            raise RuntimeError(f"frozen parameters changed during epoch {epoch}")
        if dev_eval_every and dev_metric_fn is not None \
                and (epoch + 1) % dev_eval_every == 0:
            metric = float(dev_metric_fn(ctx))
            emit({"epoch": epoch, "dev_metric": metric})
            if best_metric is None or metric > best_metric:
                best_metric = metric
                best_epoch = epoch
                best = snapshot_params(model)

    last = snapshot_params(model)
    if best is None:
        best = last
    return TrainResult(best, last, log, best_metric, best_epoch,
                       counter.count, step)


def write_log(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

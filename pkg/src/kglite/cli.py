"""Command-line entry points.

Subcommands: gen-data, pretrain-base, train, eval-lp, eval-tc,
count-params, ablate, oracle-check. Exit codes: 0 success, 1 runtime
failure (training/eval), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import fixtures
from .adapters import (ABLATIONS, ablation_adapter, build_adapter,
                       count_tunable_params, placements_for)
from .config import ConfigError, RunConfig, rng_children
from .data import DatasetError, PromptPattern, build_tokenizer, load_kg
from .encoder import EncoderModel, ModelConfig
from .evaluation import link_prediction_eval, triplet_classification_eval
from .oracle import oracle_ranks, perfect_scorer
from .training import (LP_SLOTS, TC_SLOTS, ScoreContext, TrainingAborted,
                       restore_params, train, write_log)


class UsageError(ValueError):
    pass


def vocab_hash(tokenizer) -> str:
    h = hashlib.sha256()
    for tok in tokenizer.id_to_token:
        h.update(tok.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def model_config_from(rc: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=rc.d_model,
                       num_layers=rc.num_layers, num_heads=rc.num_heads,
                       ffn_dim=rc.ffn_dim, max_seq_len=rc.max_seq_len,
                       dropout=rc.dropout)


def snapshot_config(rc: RunConfig) -> dict:
    """Config as recorded in reports and checkpoints.

    out_dir is dropped: rerunning the same seed into a different directory
    must still produce identical bytes.
    """
    doc = rc.to_json_dict()
    doc.pop("out_dir")
    return doc


def active_pattern(rc: RunConfig, adapter) -> PromptPattern:
    """Prompt positions used for clozes under the configured adapter.

    The reserved prompt tokens stay in the sequence whenever the config
    asks for them and either no adapter exists (they embed as ordinary
    vocabulary, so pretraining sees the same geometry adaptation will) or
    the adapter carries a prompt encoder to substitute them. An adapter
    without a prompt encoder drops them entirely.
    """
    if rc.n_prompt > 0 and (adapter is None or adapter.prompt is not None):
        return rc.prompt_pattern
    return PromptPattern(0, 0, 0)


class Run:
    """A loaded dataset plus a model wired for the configured mode."""

    def __init__(self, rc: RunConfig, need_labels: bool = False):
        self.rc = rc
        self.kg = load_kg(rc.dataset_dir)
        self.tokenizer = build_tokenizer(self.kg, n_prompt_slots=rc.n_prompt)
        self.rngs = rng_children(rc.seed)
        self.mconfig = model_config_from(rc, len(self.tokenizer))
        self.model = EncoderModel(self.mconfig, self.rngs["init"])
        self.vocab_hash = vocab_hash(self.tokenizer)

        if rc.base_checkpoint:
            base = ckpt_io.load_checkpoint(rc.base_checkpoint)
            self._check_vocab(base)
            ckpt_io.load_into_model(self.model, base,
                                    only_groups=(ckpt_io.BASE, ckpt_io.POOLER,
                                                 ckpt_io.NSP_HEAD))

        if rc.mode == "palt":
            self.model.freeze_all()
            if rc.unfreeze_head:
                self.model.set_frozen("pooler", False)
                self.model.set_frozen("nsp_head", False)
            self.model.adapter = build_adapter(
                rc.d_model, rc.num_layers, rc.n_prompt, self.rngs["init"],
                calibration=tuple(rc.calibration), train_biases=rc.train_biases,
                project_all_inputs=rc.project_all_inputs)
            self.seed_prompt_rows()
        elif rc.mode == "zero-shot":
            self.model.freeze_all()
        else:  # pretrain-base, finetune
            self.model.unfreeze_all()

        if rc.adapter_checkpoint:
            if self.model.adapter is None:
                raise ConfigError("adapter_checkpoint given but mode "
                                  f"{rc.mode!r} builds no adapter")
            adapter = ckpt_io.load_checkpoint(rc.adapter_checkpoint)
            self._check_vocab(adapter, require=False)
            ckpt_io.load_into_model(self.model, adapter,
                                    only_groups=(ckpt_io.ADAPTER,))

        self.ctx = ScoreContext(self.model, self.kg, self.tokenizer,
                                active_pattern(rc, self.model.adapter),
                                rc.max_seq_len)
        if need_labels:
            for split in ("dev", "test"):
                if any(f.label is None for f in self.kg.splits[split]):
                    raise DatasetError(f"task tc needs 0/1 labels in {split}.tsv")

    def seed_prompt_rows(self):
        """Copy the base's embeddings of the reserved prompt ids into the
        adapter, so a zero-initialized adapter scores exactly like the base.
        """
        adapter = self.model.adapter
        if adapter is None or adapter.prompt is None:
            return
        ids = [self.tokenizer.prompt_id(i) for i in range(adapter.n_prompt)]
        table = self.model.parameters()["embeddings.token"].data
        adapter.prompt.embeddings.data[...] = table[ids]

    def _check_vocab(self, ckpt, require: bool = True):
        size = ckpt.config.get("vocab_size")
        if size is None:
            if require:
                raise ConfigError("checkpoint lacks vocab_size metadata")
            return
        if size != len(self.tokenizer):
            raise ConfigError(
                f"vocabulary mismatch: checkpoint built with {size} tokens, "
                f"dataset produces {len(self.tokenizer)}")
        if ckpt.config.get("vocab_hash") not in (None, self.vocab_hash):
            raise ConfigError("vocabulary mismatch: same size but different "
                              "token content (hash differs)")

    def ckpt_config(self) -> dict:
        return {"run": snapshot_config(self.rc),
                "vocab_size": len(self.tokenizer),
                "vocab_hash": self.vocab_hash}

    def evaluate(self, score_fn=None):
        fn = score_fn or self.ctx.scorer(self.rc.eval_batch_rows)
        cfg = snapshot_config(self.rc)
        cfg["tunable_params"] = self.model.trainable_count()
        if self.rc.task == "tc":
            return triplet_classification_eval(fn, self.kg, config=cfg)
        return link_prediction_eval(fn, self.kg, "test", config=cfg)

    def dev_metric_fn(self):
        rc = self.rc
        if rc.task == "tc":
            def metric(ctx):
                from .evaluation import tune_threshold
                dev = self.kg.splits["dev"]
                scores = ctx.score_facts(list(dev), rc.eval_batch_rows)
                labels = [f.label for f in dev]
                return tune_threshold(scores, labels)[1]
        else:
            def metric(ctx):
                rep = link_prediction_eval(ctx.scorer(rc.eval_batch_rows),
                                           self.kg, "dev")
                return rep.hits10
        return metric


def _write_report(report, out_dir: Path, wall_clock: float, meta: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    report.wall_clock = wall_clock
    (out_dir / "report.json").write_text(report.to_json() + "\n",
                                         encoding="utf-8")
    (out_dir / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    meta = dict(meta, wall_clock_s=wall_clock)
    (out_dir / "run_meta.json").write_text(
        json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    rc = RunConfig.from_file(args.config)
    rc = _apply_overrides(rc, args)
    if args.command == "pretrain-base" and rc.mode != "pretrain-base":
        rc.mode = "pretrain-base"
    if rc.mode == "zero-shot":
        raise ConfigError("zero-shot mode has nothing to train; use eval-lp")
    t0 = time.monotonic()
    run = Run(rc, need_labels=rc.task == "tc")
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    slots = TC_SLOTS if rc.task == "tc" else LP_SLOTS
    dev_fn = run.dev_metric_fn() if rc.dev_eval_every else None
    result = train(
        run.ctx, epochs=rc.epochs, batch_size=rc.batch_size, lr=rc.lr,
        n_ns=rc.n_ns, slots=slots, warmup_ratio=rc.warmup_ratio,
        weight_decay=rc.weight_decay, clip_norm=rc.clip_norm,
        shuffle_rng=run.rngs["shuffle"], neg_rng=run.rngs["negatives"],
        dropout_rng=run.rngs["dropout"] if rc.dropout > 0 else None,
        dev_eval_every=rc.dev_eval_every, dev_metric_fn=dev_fn,
        max_steps=args.max_steps)
    restore_params(run.model, result.best_params)
    write_log(out_dir / "train_log.jsonl", result.log)

    cfg = run.ckpt_config()
    if rc.mode == "pretrain-base":
        ckpt_io.save_model(out_dir / "base.ckpt", run.model, cfg)
    elif rc.mode == "palt":
        ckpt_io.save_model(out_dir / "adapter.ckpt", run.model, cfg,
                           only_groups=(ckpt_io.ADAPTER,))
        ckpt_io.save_model(out_dir / "model.ckpt", run.model, cfg)
    else:
        ckpt_io.save_model(out_dir / "model.ckpt", run.model, cfg)

    report = run.evaluate()
    report.clamp_count = result.clamp_count
    meta = {"steps": result.steps, "best_epoch": result.best_epoch,
            "best_dev_metric": result.best_metric,
            "clamp_count": result.clamp_count,
            "tunable_params": run.model.trainable_count(),
            "base_params": run.model.base_count()}
    _write_report(report, out_dir, time.monotonic() - t0, meta)
    print(report.table())
    return 0


def cmd_eval(args) -> int:
    rc = RunConfig.from_file(args.config)
    rc = _apply_overrides(rc, args)
    rc.task = "lp" if args.command == "eval-lp" else "tc"
    t0 = time.monotonic()
    run = Run(rc, need_labels=rc.task == "tc")
    score_fn = perfect_scorer(run.kg) if args.oracle_scorer else None
    report = run.evaluate(score_fn)
    _write_report(report, Path(rc.out_dir), time.monotonic() - t0,
                  {"tunable_params": run.model.trainable_count()})
    print(report.table())
    return 0


def cmd_count_params(args) -> int:
    rc = RunConfig.from_file(args.config)
    rc = _apply_overrides(rc, args)
    d = rc.d_model
    placements = placements_for(tuple(rc.calibration), rc.num_layers)
    c = len(placements)
    n_p = rc.n_prompt
    formula = count_tunable_params(d, d, n_p, c)
    bias_count = (d if n_p > 0 else 0) + c * d if rc.train_biases else 0
    rows = []
    if n_p > 0:
        rows.append(("prompt embeddings", n_p * d))
        rows.append(("prompt projection W", d * d))
        if rc.train_biases:
            rows.append(("prompt projection b", d))
    for p in placements:
        rows.append((f"calibration[{p}] W", d * d))
        if rc.train_biases:
            rows.append((f"calibration[{p}] b", d))
    total = sum(n for _, n in rows)
    base_total = args.base_total
    if base_total is None:
        from .encoder import base_param_count
        base_total = base_param_count(model_config_from(rc, args.vocab_size))
    print(f"{'component':<24}{'params':>12}")
    for name, n in rows:
        print(f"{name:<24}{n:>12,}")
    print(f"{'adapter total':<24}{total:>12,}")
    print(f"{'formula (bias-free)':<24}{formula:>12,}")
    print(f"{'base total':<24}{base_total:>12,}")
    ratio = 100.0 * formula / base_total if base_total else 0.0
    print(f"{'tunable/base':<24}{ratio:>11.1f}%")
    return 0


def cmd_ablate(args) -> int:
    rc = RunConfig.from_file(args.config)
    rc = _apply_overrides(rc, args)
    if rc.mode != "palt":
        raise ConfigError("ablate requires mode 'palt' with a base checkpoint")
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = {}
    for kind in ABLATIONS:
        run = Run(rc)
        run.model.adapter = ablation_adapter(kind, rc.d_model, rc.num_layers,
                                             rc.n_prompt, run.rngs["init"],
                                             train_biases=rc.train_biases)
        run.seed_prompt_rows()
        run.ctx = ScoreContext(run.model, run.kg, run.tokenizer,
                               active_pattern(rc, run.model.adapter),
                               rc.max_seq_len)
        count = run.model.trainable_count()
        entry = {"tunable_params": count}
        if kind == "none":
            report = link_prediction_eval(
                run.ctx.scorer(rc.eval_batch_rows), run.kg,
                args.zero_shot_split)
            entry["zero_shot"] = {"mr": report.mr, "hits10": report.hits10}
        else:
            result = train(
                run.ctx, epochs=rc.epochs, batch_size=rc.batch_size, lr=rc.lr,
                n_ns=rc.n_ns, warmup_ratio=rc.warmup_ratio,
                weight_decay=rc.weight_decay,
                shuffle_rng=run.rngs["shuffle"], neg_rng=run.rngs["negatives"],
                dropout_rng=run.rngs["dropout"] if rc.dropout > 0 else None,
                max_steps=args.steps)
            entry["steps"] = result.steps
            entry["final_loss"] = result.log[-1]["loss"]
        grid[kind] = entry
        print(f"{kind:<16} tunable={count:<10,} "
              + (f"zero-shot hits10={entry['zero_shot']['hits10']:.3f}"
                 if kind == "none" else f"loss={entry['final_loss']:.4f}"))
    (out_dir / "ablation.json").write_text(
        json.dumps(grid, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    counts = sorted({e["tunable_params"] for e in grid.values()})
    print(f"distinct tunable-parameter counts: {counts}")
    return 0


def _quantized_scorer(seed: int):
    """Deterministic fact scorer with deliberate ties, for oracle checks."""
    def score(facts):
        return [(((31 * f.head + 17 * f.relation + 7 * f.tail + seed) % 13)
                 / 13.0) for f in facts]
    return score


def cmd_oracle_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for i in range(args.kgs):
        n_e = int(rng.integers(4, 16))
        n_r = int(rng.integers(1, 5))
        kg = fixtures.random_kg(rng, n_e, n_r, int(rng.integers(10, 60)))
        score_fn = _quantized_scorer(i)
        report = link_prediction_eval(score_fn, kg, "test")
        got = {(tuple(r["fact"]), r["slot"]): r["rank"] for r in report.results}
        want = {((h, r, t), slot): rank
                for h, r, t, slot, rank in oracle_ranks(kg, "test", score_fn)}
        if got != want:
            failures += 1
            print(f"kg {i}: pipeline and oracle disagree", file=sys.stderr)
    ok = failures == 0
    print(f"oracle check: {args.kgs - failures}/{args.kgs} KGs agree")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    kg = fixtures.synth_kg(seed=args.seed, tc=args.tc)
    fixtures.write_kg(kg, args.out)
    sizes = {k: len(v) for k, v in kg.splits.items()}
    print(f"wrote {kg.n_entities} entities, {kg.n_relations} relations, "
          f"splits {sizes} to {args.out}")
    return 0


def _apply_overrides(rc: RunConfig, args) -> RunConfig:
    doc = rc.to_json_dict()
    for key in ("seed", "out", "base_checkpoint", "adapter_checkpoint"):
        val = getattr(args, key, None)
        if val is not None:
            doc["out_dir" if key == "out" else key] = val
    return RunConfig.from_dict(doc)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kglite",
                                description="knowledge-graph completion with "
                                            "a frozen encoder and adapters")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON run config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--base-checkpoint", dest="base_checkpoint",
                        default=None)
        sp.add_argument("--adapter-checkpoint", dest="adapter_checkpoint",
                        default=None)

    for name in ("pretrain-base", "train"):
        sp = sub.add_parser(name, help=f"{name} run")
        common(sp)
        sp.add_argument("--max-steps", type=int, default=None,
                        help="cap optimizer steps (testing)")
        sp.set_defaults(fn=cmd_train)

    for name in ("eval-lp", "eval-tc"):
        sp = sub.add_parser(name, help=f"evaluate a checkpoint ({name[5:]})")
        common(sp)
        sp.add_argument("--oracle-scorer", action="store_true",
                        help="score with split membership instead of the "
                             "model (test hook)")
        sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("count-params", help="tunable-parameter breakdown")
    common(sp)
    sp.add_argument("--base-total", type=int, default=None,
                    help="compare against this base parameter count")
    sp.add_argument("--vocab-size", dest="vocab_size", type=int, default=30522,
                    help="vocab size for the analytic base count")
    sp.set_defaults(fn=cmd_count_params)

    sp = sub.add_parser("ablate", help="train/eval the reduced configurations")
    common(sp)
    sp.add_argument("--steps", type=int, default=10,
                    help="training steps per configuration")
    sp.add_argument("--zero-shot-split", default="test")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("oracle-check",
                        help="compare pipeline ranks against the brute-force "
                             "oracle on random KGs")
    sp.add_argument("--kgs", type=int, default=20)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_oracle_check)

    sp = sub.add_parser("gen-data", help="write the synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--tc", action="store_true",
                    help="label dev/test for triplet classification")
    sp.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingAborted, ckpt_io.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

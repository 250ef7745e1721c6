"""Run configuration: one JSON document drives a whole run.

Unknown keys are rejected so typos fail loudly. Environment variables
KGLITE_OUT and KGLITE_SEED override output directory and seed; nothing else
is read from the environment.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PromptPattern

TASKS = ("lp", "tc")
MODES = ("palt", "finetune", "pretrain-base", "zero-shot")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset_dir: str
    task: str = "lp"
    mode: str = "palt"
    # model dims
    d_model: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 64
    dropout: float = 0.1
    # adapter
    n_prompt: int = 2
    pattern: str = "2-0-0"
    calibration: list[str] = field(default_factory=lambda: ["middle", "last"])
    train_biases: bool = True
    unfreeze_head: bool = False
    project_all_inputs: bool = False
    # optimization
    n_ns: int = 5
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 0.0
    dev_eval_every: int = 0
    # plumbing
    seed: int = 0
    out_dir: str = "runs/out"
    base_checkpoint: str | None = None
    adapter_checkpoint: str | None = None
    eval_batch_rows: int = 512

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "palt" and not self.base_checkpoint:
            raise ConfigError("mode 'palt' requires base_checkpoint")
        pat = PromptPattern.parse(self.pattern)
        if pat.total != self.n_prompt:
            raise ConfigError(f"pattern {self.pattern} places {pat.total} "
                              f"prompts but n_prompt={self.n_prompt}")
        for c in self.calibration:
            if c not in ("middle", "last"):
                raise ConfigError(f"calibration entries must be middle/last, "
                                  f"got {c!r}")
        if not 0 < self.warmup_ratio < 1:
            raise ConfigError(f"warmup_ratio must be in (0,1), "
                              f"got {self.warmup_ratio}")

    @property
    def prompt_pattern(self) -> PromptPattern:
        return PromptPattern.parse(self.pattern)

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "dataset_dir" not in doc:
            raise ConfigError("config is missing dataset_dir")
        return cls(**doc)

    @classmethod
    def from_file(cls, path, apply_env: bool = True) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        if apply_env:
            if os.environ.get("KGLITE_OUT"):
                doc["out_dir"] = os.environ["KGLITE_OUT"]
            if os.environ.get("KGLITE_SEED"):
                try:
                    doc["seed"] = int(os.environ["KGLITE_SEED"])
                except ValueError:
                    raise ConfigError("KGLITE_SEED must be an integer") from None
        return cls.from_dict(doc)


def rng_children(seed: int) -> dict[str, np.random.Generator]:
    """All randomness in a run flows from these four named streams."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("init", "shuffle", "negatives", "dropout")
    return {n: np.random.default_rng(s) for n, s in zip(names, children)}

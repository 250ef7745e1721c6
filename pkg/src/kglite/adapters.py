"""Trainable add-ons for a frozen encoder: prompts and calibration.

Both pieces are affine maps with a skip connection, so zero-initialized
weights leave the base model's behavior untouched:

  prompt encode   e' = W_p e + b_p + e   (virtual prompt embeddings only)
  calibrate       h' = W_c h + b_c + h   (hidden states after chosen layers)

Prompt embeddings start small-random; W_p, b_p, W_c, b_c start at zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

_INIT_STD = 0.02

MIDDLE, LAST = "middle", "last"
ABLATIONS = ("full", "no_prompt", "no_cal_middle", "no_cal_last",
             "no_cal_both", "none")


def count_tunable_params(d_e: int, d_h: int, n_p: int, c: int = 2) -> int:
    """Bias-free tunable-parameter count.

    n_p * d_e prompt embeddings, the d_e x d_h prompt projection, and one
    d_h x d_h matrix per calibration encoder. With n_p=0 the prompt encoder
    (projection included) is not allocated at all.
    """
    if min(d_e, d_h, n_p, c) < 0:
        raise ValueError("negative dimension")
    if n_p == 0:
        return c * d_h * d_h
    return n_p * d_e + d_e * d_h + c * d_h * d_h


class PromptEncoder:
    def __init__(self, n_prompt: int, d_model: int, rng: np.random.Generator,
                 train_biases: bool = True, prefix: str = "adapter.prompt"):
        if n_prompt <= 0:
            raise ValueError("PromptEncoder needs n_prompt >= 1")
        self.n_prompt = n_prompt
        self.d_model = d_model
        self.embeddings = T.parameter(rng.normal(0.0, _INIT_STD, (n_prompt, d_model)),
                                      f"{prefix}.embeddings")
        self.w = T.parameter(np.zeros((d_model, d_model)), f"{prefix}.w")
        self.b = T.parameter(np.zeros(d_model), f"{prefix}.b")
        self.b.requires_grad = train_biases

    def encode(self, e: T.Tensor) -> T.Tensor:
        if e.shape[-1] != self.d_model:
            raise T.ShapeError(f"prompt_encode: last dim {e.shape[-1]} != "
                               f"d_model {self.d_model}")
        return T.add(T.affine(e, self.w, self.b), e)

    def encoded_table(self) -> T.Tensor:
        return self.encode(self.embeddings)

    def named_parameters(self):
        return [(t.name, t) for t in (self.embeddings, self.w, self.b)]


class CalibrationEncoder:
    def __init__(self, d_model: int, placement: int, train_biases: bool = True,
                 prefix: str = "adapter"):
        if placement < 1:
            raise ValueError(f"calibration placement {placement} must be >= 1")
        self.d_model = d_model
        self.placement = placement
        self.w = T.parameter(np.zeros((d_model, d_model)),
                             f"{prefix}.cal{placement:02d}.w")
        self.b = T.parameter(np.zeros(d_model), f"{prefix}.cal{placement:02d}.b")
        self.b.requires_grad = train_biases

    def apply(self, h: T.Tensor) -> T.Tensor:
        if h.shape[-1] != self.d_model:
            raise T.ShapeError(f"calibrate: last dim {h.shape[-1]} != "
                               f"d_model {self.d_model}")
        return T.add(T.affine(h, self.w, self.b), h)

    def named_parameters(self):
        return [(t.name, t) for t in (self.w, self.b)]


class Adapter:
    """Bundle of one optional prompt encoder and any calibration encoders."""

    def __init__(self, prompt: PromptEncoder | None,
                 calibrations: list[CalibrationEncoder],
                 project_all_inputs: bool = False):
        self.prompt = prompt
        self.calibrations = {c.placement: c for c in calibrations}
        if len(self.calibrations) != len(calibrations):
            raise ValueError("duplicate calibration placement")
        self.project_all_inputs = project_all_inputs

    @property
    def n_prompt(self) -> int:
        return self.prompt.n_prompt if self.prompt is not None else 0

    def calibration_at(self, layer: int) -> CalibrationEncoder | None:
        return self.calibrations.get(layer)

    def named_parameters(self):
        out = []
        if self.prompt is not None:
            out += self.prompt.named_parameters()
        for placement in sorted(self.calibrations):
            out += self.calibrations[placement].named_parameters()
        return out

    def trainable_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters() if t.requires_grad)

    def formula_count(self, d_e: int | None = None) -> int:
        d_h = (self.prompt.d_model if self.prompt is not None
               else next(iter(self.calibrations.values())).d_model
               if self.calibrations else 0)
        if d_e is None:
            d_e = d_h
        return count_tunable_params(d_e, d_h, self.n_prompt, len(self.calibrations))

    def substitute_prompts(self, x: T.Tensor, prompt_slots: np.ndarray) -> T.Tensor:
        """Swap encoded prompt embeddings into x at flagged positions.

        prompt_slots is (B, L) int, -1 at text positions. With
        project_all_inputs the raw prompt rows are spliced in first and the
        affine-skip map then covers every position once.
        """
        slots = np.asarray(prompt_slots)
        if self.prompt is None:
            if (slots >= 0).any():
                raise ValueError("prompt positions given but no prompt encoder")
            return x
        if slots.max(initial=-1) >= self.prompt.n_prompt:
            raise IndexError(f"prompt slot {slots.max()} out of range "
                             f"[0, {self.prompt.n_prompt})")
        table = (self.prompt.embeddings if self.project_all_inputs
                 else self.prompt.encoded_table())
        rep = T.embedding(table, np.maximum(slots, 0))
        is_prompt = (slots >= 0).astype(np.float64)[..., None]
        keep = T.constant(1.0 - is_prompt, "text_mask")
        swap = T.constant(is_prompt, "prompt_mask")
        x = T.add(T.mul(x, keep), T.mul(rep, swap))
        if self.project_all_inputs:
            x = T.add(T.affine(x, self.prompt.w, self.prompt.b), x)
        return x


def placements_for(names, num_layers: int) -> list[int]:
    """Map placement names (middle/last) to 1-based layer indexes."""
    out = []
    for name in names:
        if name == MIDDLE:
            out.append(max(1, num_layers // 2))
        elif name == LAST:
            out.append(num_layers)
        else:
            raise ValueError(f"unknown calibration placement {name!r}")
    return sorted(set(out))


def build_adapter(d_model: int, num_layers: int, n_prompt: int,
                  rng: np.random.Generator,
                  calibration=(MIDDLE, LAST), train_biases: bool = True,
                  project_all_inputs: bool = False) -> Adapter | None:
    """Construct an adapter; returns None when there is nothing to train."""
    prompt = (PromptEncoder(n_prompt, d_model, rng, train_biases)
              if n_prompt > 0 else None)
    cals = [CalibrationEncoder(d_model, p, train_biases)
            for p in placements_for(calibration, num_layers)]
    if prompt is None and not cals:
        return None
    return Adapter(prompt, cals, project_all_inputs)


def ablation_adapter(kind: str, d_model: int, num_layers: int, n_prompt: int,
                     rng: np.random.Generator,
                     train_biases: bool = True) -> Adapter | None:
    """The five reduced configurations plus the full one.

    "none" drops the adapter entirely (zero-shot frozen base).
    """
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}, expected one of {ABLATIONS}")
    spec = {
        "full": (n_prompt, (MIDDLE, LAST)),
        "no_prompt": (0, (MIDDLE, LAST)),
        "no_cal_middle": (n_prompt, (LAST,)),
        "no_cal_last": (n_prompt, (MIDDLE,)),
        "no_cal_both": (n_prompt, ()),
        "none": (0, ()),
    }[kind]
    return build_adapter(d_model, num_layers, spec[0], rng,
                         calibration=spec[1], train_biases=train_biases)

"""BERT-style encoder: embeddings, self-attention stack, pooler, NSP head.

Post-layer-norm ordering. The sentence-pair head scores a cloze as
softmax(W·tanh(pooler(h_cls))), a 2-way distribution whose first component
is the probability that the pair is a genuine fact.

Parameters fall into three freeze groups: "base" (embeddings + layers),
"pooler", "nsp_head". Calibration/prompt adapters attach externally and
keep their own parameters; see adapters.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

_MASK_BIAS = -1e9
_INIT_STD = 0.02

GROUPS = ("base", "pooler", "nsp_head")


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 64
    num_segments: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"num_heads {self.num_heads}")


def base_param_count(c: ModelConfig) -> int:
    """Element count of the full model without allocating it."""
    d, f = c.d_model, c.ffn_dim
    emb = (c.vocab_size + c.max_seq_len + c.num_segments) * d + 2 * d
    per_layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d
    pooler = d * d + d
    nsp = 2 * d + 2
    return emb + c.num_layers * per_layer + pooler + nsp


class EncoderModel:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.adapter = None
        c = config
        self._params: dict[str, T.Tensor] = {}
        self._group_of: dict[str, str] = {}

        def par(name, group, shape, kind):
            if kind == "normal":
                data = rng.normal(0.0, _INIT_STD, size=shape)
            elif kind == "zeros":
                data = np.zeros(shape)
            else:
                data = np.ones(shape)
            t = T.parameter(data, name)
            self._params[name] = t
            self._group_of[name] = group
            return t

        par("embeddings.token", "base", (c.vocab_size, c.d_model), "normal")
        par("embeddings.position", "base", (c.max_seq_len, c.d_model), "normal")
        par("embeddings.segment", "base", (c.num_segments, c.d_model), "normal")
        par("embeddings.ln.gamma", "base", (c.d_model,), "ones")
        par("embeddings.ln.beta", "base", (c.d_model,), "zeros")
        for i in range(c.num_layers):
            p = f"layer{i:02d}"
            for proj in ("wq", "wk", "wv", "wo"):
                par(f"{p}.attn.{proj}", "base", (c.d_model, c.d_model), "normal")
            for b in ("bq", "bk", "bv", "bo"):
                par(f"{p}.attn.{b}", "base", (c.d_model,), "zeros")
            par(f"{p}.attn.ln.gamma", "base", (c.d_model,), "ones")
            par(f"{p}.attn.ln.beta", "base", (c.d_model,), "zeros")
            par(f"{p}.ffn.w1", "base", (c.d_model, c.ffn_dim), "normal")
            par(f"{p}.ffn.b1", "base", (c.ffn_dim,), "zeros")
            par(f"{p}.ffn.w2", "base", (c.ffn_dim, c.d_model), "normal")
            par(f"{p}.ffn.b2", "base", (c.d_model,), "zeros")
            par(f"{p}.ffn.ln.gamma", "base", (c.d_model,), "ones")
            par(f"{p}.ffn.ln.beta", "base", (c.d_model,), "zeros")
        par("pooler.w", "pooler", (c.d_model, c.d_model), "normal")
        par("pooler.b", "pooler", (c.d_model,), "zeros")
        par("nsp.w", "nsp_head", (c.d_model, 2), "normal")
        par("nsp.b", "nsp_head", (2,), "zeros")

    # ---- parameter bookkeeping -------------------------------------------

    def parameters(self) -> dict[str, T.Tensor]:
        return dict(self._params)

    def named_parameters(self) -> list[tuple[str, T.Tensor]]:
        items = list(self._params.items())
        if self.adapter is not None:
            items += self.adapter.named_parameters()
        return sorted(items)

    def set_frozen(self, group: str, frozen: bool):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}, "
                             f"expected one of {GROUPS}")
        for name, t in self._params.items():
            if self._group_of[name] == group:
                t.requires_grad = not frozen
                if frozen:
                    t.grad = None

    def freeze_all(self):
        for g in GROUPS:
            self.set_frozen(g, True)

    def unfreeze_all(self):
        for g in GROUPS:
            self.set_frozen(g, False)

    def trainable_parameters(self) -> list[tuple[str, T.Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def trainable_count(self) -> int:
        return sum(t.size for _, t in self.trainable_parameters())

    def base_count(self) -> int:
        return sum(t.size for n, t in self._params.items())

    def group_of(self, name: str) -> str:
        return self._group_of[name]

    # ---- forward ---------------------------------------------------------

    def _attention(self, x, mask_bias, i, training, rng):
        c = self.config
        p = self._params
        B, L, d = x.shape
        H = c.num_heads
        dh = d // H
        pre = f"layer{i:02d}.attn"

        def heads(t):
            t = T.reshape(t, (B, L, H, dh))
            return T.transpose(t, (0, 2, 1, 3))

        q = heads(T.affine(x, p[f"{pre}.wq"], p[f"{pre}.bq"]))
        k = heads(T.affine(x, p[f"{pre}.wk"], p[f"{pre}.bk"]))
        v = heads(T.affine(x, p[f"{pre}.wv"], p[f"{pre}.bv"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        scores = T.add(scores, mask_bias)
        probs = T.softmax(scores)
        ctx = T.matmul(probs, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        out = T.affine(ctx, p[f"{pre}.wo"], p[f"{pre}.bo"])
        if training and c.dropout > 0:
            out = T.dropout(out, c.dropout, rng)
        return T.layer_norm(T.add(x, out), p[f"{pre}.ln.gamma"], p[f"{pre}.ln.beta"])

    def _ffn(self, x, i, training, rng):
        c = self.config
        p = self._params
        pre = f"layer{i:02d}.ffn"
        h = T.gelu(T.affine(x, p[f"{pre}.w1"], p[f"{pre}.b1"]))
        h = T.affine(h, p[f"{pre}.w2"], p[f"{pre}.b2"])
        if training and c.dropout > 0:
            h = T.dropout(h, c.dropout, rng)
        return T.layer_norm(T.add(x, h), p[f"{pre}.ln.gamma"], p[f"{pre}.ln.beta"])

    def encode(self, token_ids: np.ndarray, segment_ids: np.ndarray,
               attn_mask: np.ndarray | None = None, prompt_slots=None,
               training: bool = False, rng: np.random.Generator | None = None):
        """Run the stack over a (B, L) batch; returns final hidden states.

        attn_mask is (B, L) with 1.0 at real tokens, 0.0 at padding.
        prompt_slots (B, L) carries -1 at text positions and the adapter's
        prompt slot index elsewhere; requires an attached adapter.
        """
        c = self.config
        p = self._params
        token_ids = np.asarray(token_ids)
        segment_ids = np.asarray(segment_ids)
        if token_ids.ndim == 1:
            token_ids = token_ids[None, :]
            segment_ids = segment_ids[None, :]
            if attn_mask is not None:
                attn_mask = np.asarray(attn_mask)[None, :]
            if prompt_slots is not None:
                prompt_slots = np.asarray(prompt_slots)[None, :]
        B, L = token_ids.shape
        if segment_ids.shape != (B, L):
            raise T.ShapeError(f"encode: segment ids {segment_ids.shape} do not "
                               f"match token ids {(B, L)}")
        if L > c.max_seq_len:
            raise ValueError(f"sequence length {L} exceeds max_seq_len "
                             f"{c.max_seq_len}")
        if token_ids.min() < 0 or token_ids.max() >= c.vocab_size:
            raise IndexError(f"token id outside vocabulary of size {c.vocab_size}")
        if training and c.dropout > 0 and rng is None:
            raise ValueError("training-mode encode needs an rng for dropout")

        x = T.embedding(p["embeddings.token"], token_ids)
        if self.adapter is not None and prompt_slots is not None:
            x = self.adapter.substitute_prompts(x, prompt_slots)
        pos = T.embedding(p["embeddings.position"], np.arange(L))
        seg = T.embedding(p["embeddings.segment"], segment_ids)
        x = T.add(T.add(x, pos), seg)
        x = T.layer_norm(x, p["embeddings.ln.gamma"], p["embeddings.ln.beta"])
        if training and c.dropout > 0:
            x = T.dropout(x, c.dropout, rng)

        if attn_mask is None:
            attn_mask = np.ones((B, L))
        bias = T.constant((1.0 - np.asarray(attn_mask, dtype=np.float64))
                          * _MASK_BIAS, "attn_mask_bias")
        bias = T.reshape(bias, (B, 1, 1, L))

        for i in range(c.num_layers):
            x = self._attention(x, bias, i, training, rng)
            x = self._ffn(x, i, training, rng)
            if self.adapter is not None:
                cal = self.adapter.calibration_at(i + 1)
                if cal is not None:
                    x = cal.apply(x)
        return x

    def nsp_probability(self, hidden) -> T.Tensor:
        """(B, 2) probabilities from the [CLS] state; column 0 is p(fact)."""
        p = self._params
        cls = T.select_pos(hidden, 0)
        pooled = T.tanh(T.affine(cls, p["pooler.w"], p["pooler.b"]))
        logits = T.affine(pooled, p["nsp.w"], p["nsp.b"])
        return T.softmax(logits)

    def nsp_logits(self, hidden) -> T.Tensor:
        p = self._params
        cls = T.select_pos(hidden, 0)
        pooled = T.tanh(T.affine(cls, p["pooler.w"], p["pooler.b"]))
        return T.affine(pooled, p["nsp.w"], p["nsp.b"])

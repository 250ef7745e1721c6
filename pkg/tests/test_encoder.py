import numpy as np
import pytest

from kglite import tensor as T
from kglite.encoder import EncoderModel, ModelConfig, base_param_count


def make_model(seed=0, **kw):
    kw.setdefault("vocab_size", 20)
    kw.setdefault("d_model", 16)
    kw.setdefault("num_layers", 2)
    kw.setdefault("num_heads", 2)
    kw.setdefault("ffn_dim", 24)
    kw.setdefault("max_seq_len", 12)
    kw.setdefault("dropout", 0.0)
    return EncoderModel(ModelConfig(**kw), np.random.default_rng(seed))


class TestConfigAndCounts:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(vocab_size=10, d_model=10, num_heads=3)

    def test_analytic_count_matches_allocation(self):
        for kw in ({}, {"d_model": 32, "num_layers": 1, "ffn_dim": 64},
                   {"vocab_size": 77, "num_heads": 4, "max_seq_len": 9}):
            m = make_model(**kw)
            assert m.base_count() == base_param_count(m.config)

    def test_init_statistics(self):
        m = make_model(vocab_size=1000, d_model=64)
        tok = m.parameters()["embeddings.token"].data
        assert abs(tok.std() - 0.02) < 0.002
        assert abs(tok.mean()) < 0.001
        np.testing.assert_array_equal(
            m.parameters()["embeddings.ln.gamma"].data, 1.0)
        np.testing.assert_array_equal(m.parameters()["nsp.b"].data, 0.0)

    def test_same_seed_same_init(self):
        a, b = make_model(seed=5), make_model(seed=5)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)


class TestFreezing:
    def test_group_freeze_counts(self):
        m = make_model()
        total = m.base_count()
        pooler = 16 * 16 + 16
        nsp = 2 * 16 + 2
        assert m.trainable_count() == total
        m.set_frozen("base", True)
        assert m.trainable_count() == pooler + nsp
        m.freeze_all()
        assert m.trainable_count() == 0
        assert m.trainable_parameters() == []
        m.unfreeze_all()
        assert m.trainable_count() == total

    def test_unknown_group(self):
        with pytest.raises(ValueError, match="unknown parameter group"):
            make_model().set_frozen("adapters", True)

    def test_freezing_clears_grad(self):
        m = make_model()
        w = m.parameters()["pooler.w"]
        w.grad = np.zeros_like(w.data)
        m.set_frozen("pooler", True)
        assert w.grad is None and not w.requires_grad

    def test_group_of(self):
        m = make_model()
        assert m.group_of("layer00.ffn.w1") == "base"
        assert m.group_of("pooler.b") == "pooler"
        assert m.group_of("nsp.w") == "nsp_head"


class TestEncodeShapeAndErrors:
    def test_output_shape(self):
        m = make_model()
        h = m.encode(np.zeros((3, 7), dtype=int), np.zeros((3, 7), dtype=int))
        assert h.shape == (3, 7, 16)

    def test_one_dim_promotion(self):
        m = make_model()
        ids = np.array([2, 4, 5, 3])
        segs = np.zeros(4, dtype=int)
        single = m.encode(ids, segs)
        batched = m.encode(ids[None, :], segs[None, :])
        np.testing.assert_array_equal(single.data, batched.data)

    def test_too_long_rejected(self):
        m = make_model(max_seq_len=4)
        with pytest.raises(ValueError, match="max_seq_len"):
            m.encode(np.zeros((1, 5), dtype=int), np.zeros((1, 5), dtype=int))

    def test_bad_token_id(self):
        m = make_model(vocab_size=10)
        with pytest.raises(IndexError):
            m.encode(np.array([[10]]), np.array([[0]]))

    def test_segment_shape_mismatch(self):
        m = make_model()
        with pytest.raises(T.ShapeError):
            m.encode(np.zeros((1, 4), dtype=int), np.zeros((1, 5), dtype=int))

    def test_training_requires_rng(self):
        m = make_model(dropout=0.1)
        ids = np.zeros((1, 4), dtype=int)
        with pytest.raises(ValueError, match="rng"):
            m.encode(ids, ids, training=True)


class TestAttentionMath:
    def test_uniform_attention_averages_values(self):
        # zeroed q/k projections give uniform attention; with identity v and
        # output projections the context at every position is the mean value
        m = make_model(num_layers=1, num_heads=2)
        p = m.parameters()
        for name in ("wq", "wk"):
            p[f"layer00.attn.{name}"].data[:] = 0.0
        p["layer00.attn.wv"].data[:] = np.eye(16)
        p["layer00.attn.wo"].data[:] = np.eye(16)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 16))
        bias = T.constant(np.zeros((2, 1, 1, 5)))
        out = m._attention(T.constant(x), bias, 0, False, None)
        resid = x + x.mean(axis=1, keepdims=True)
        mu = resid.mean(axis=-1, keepdims=True)
        var = resid.var(axis=-1, keepdims=True)
        expect = (resid - mu) / np.sqrt(var + 1e-12)
        np.testing.assert_allclose(out.data, expect, atol=1e-9)

    def test_padding_cannot_leak(self):
        m = make_model(seed=11)
        rng = np.random.default_rng(0)
        ids = rng.integers(0, 20, size=(2, 8))
        segs = np.zeros((2, 8), dtype=int)
        mask = np.ones((2, 8))
        mask[:, 6:] = 0.0
        padded = m.encode(ids, segs, attn_mask=mask)
        trimmed = m.encode(ids[:, :6], segs[:, :6])
        np.testing.assert_allclose(padded.data[:, :6], trimmed.data, atol=1e-9)

    def test_pad_content_irrelevant(self):
        m = make_model(seed=11)
        rng = np.random.default_rng(1)
        ids = rng.integers(0, 20, size=(1, 8))
        segs = np.zeros((1, 8), dtype=int)
        mask = np.ones((1, 8))
        mask[:, 5:] = 0.0
        a = m.encode(ids, segs, attn_mask=mask)
        ids2 = ids.copy()
        ids2[:, 5:] = 7  # different junk under the mask
        b = m.encode(ids2, segs, attn_mask=mask)
        np.testing.assert_allclose(a.data[:, :5], b.data[:, :5], atol=1e-9)

    def test_batch_rows_independent(self):
        m = make_model(seed=4)
        rng = np.random.default_rng(2)
        ids = rng.integers(0, 20, size=(2, 6))
        segs = rng.integers(0, 2, size=(2, 6))
        fwd = m.encode(ids, segs)
        swapped = m.encode(ids[::-1].copy(), segs[::-1].copy())
        np.testing.assert_allclose(fwd.data, swapped.data[::-1], atol=1e-10)

    def test_position_matters(self):
        m = make_model(seed=4)
        ids = np.array([[4, 5, 6, 7]])
        segs = np.zeros((1, 4), dtype=int)
        out = m.encode(ids, segs)
        out_rev = m.encode(ids[:, ::-1].copy(), segs)
        assert np.abs(out.data - out_rev.data[:, ::-1]).max() > 1e-3


class TestNspHead:
    def _plain_nsp_model(self):
        m = make_model(num_layers=0)
        p = m.parameters()
        p["pooler.w"].data[:] = 0.0  # pooled = tanh(0) = 0 for any input
        p["nsp.w"].data[:] = 0.0
        return m, p

    def test_uniform_when_logits_zero(self):
        m, _ = self._plain_nsp_model()
        h = m.encode(np.array([[2, 4, 3]]), np.array([[0, 0, 0]]))
        probs = m.nsp_probability(h)
        np.testing.assert_allclose(probs.data, [[0.5, 0.5]], atol=1e-15)

    def test_log3_bias_gives_three_quarters(self):
        m, p = self._plain_nsp_model()
        p["nsp.b"].data[:] = [np.log(3.0), 0.0]
        h = m.encode(np.array([[2, 4, 3]]), np.array([[0, 0, 0]]))
        probs = m.nsp_probability(h)
        np.testing.assert_allclose(probs.data, [[0.75, 0.25]], atol=1e-12)

    def test_probability_rows_normalized(self):
        m = make_model(seed=9)
        rng = np.random.default_rng(5)
        ids = rng.integers(0, 20, size=(4, 6))
        segs = rng.integers(0, 2, size=(4, 6))
        probs = m.nsp_probability(m.encode(ids, segs))
        assert probs.shape == (4, 2)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
        logits = m.nsp_logits(m.encode(ids, segs))
        manual = np.exp(logits.data)
        manual /= manual.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(probs.data, manual, atol=1e-12)


class TestDropout:
    def test_training_mode_stochastic(self):
        m = make_model(dropout=0.5, seed=2)
        ids = np.array([[2, 4, 5, 3]])
        segs = np.zeros((1, 4), dtype=int)
        base = m.encode(ids, segs)
        a = m.encode(ids, segs, training=True, rng=np.random.default_rng(0))
        b = m.encode(ids, segs, training=True, rng=np.random.default_rng(1))
        assert np.abs(a.data - base.data).max() > 1e-6
        assert np.abs(a.data - b.data).max() > 1e-6

    def test_training_deterministic_given_rng(self):
        m = make_model(dropout=0.5, seed=2)
        ids = np.array([[2, 4, 5, 3]])
        segs = np.zeros((1, 4), dtype=int)
        a = m.encode(ids, segs, training=True, rng=np.random.default_rng(7))
        b = m.encode(ids, segs, training=True, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(a.data, b.data)

    def test_eval_mode_ignores_dropout(self):
        m = make_model(dropout=0.5, seed=2)
        ids = np.array([[2, 4, 5, 3]])
        segs = np.zeros((1, 4), dtype=int)
        np.testing.assert_array_equal(m.encode(ids, segs).data,
                                      m.encode(ids, segs).data)

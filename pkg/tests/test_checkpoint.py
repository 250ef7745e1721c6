import json
import struct

import numpy as np
import pytest

from kglite import checkpoint as C
from kglite.adapters import build_adapter
from kglite.encoder import EncoderModel, ModelConfig


def small_model(seed=0, with_adapter=False):
    cfg = ModelConfig(vocab_size=15, d_model=8, num_layers=2, num_heads=2,
                      ffn_dim=12, max_seq_len=10, dropout=0.0)
    m = EncoderModel(cfg, np.random.default_rng(seed))
    if with_adapter:
        m.adapter = build_adapter(8, 2, 2, np.random.default_rng(seed + 1))
    return m


def sample_params(seed=0):
    rng = np.random.default_rng(seed)
    params = {"w1": rng.normal(size=(3, 4)), "b1": rng.normal(size=4),
              "deep.w2": rng.normal(size=(2, 2, 2))}
    groups = {"w1": C.BASE, "b1": C.BASE, "deep.w2": C.POOLER}
    return params, groups


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        params, groups = sample_params()
        path = C.save_checkpoint(tmp_path / "x.ckpt", params, groups,
                                 {"lr": 1e-3})
        ckpt = C.load_checkpoint(path)
        assert ckpt.config == {"lr": 1e-3}
        assert set(ckpt.tensors) == set(params)
        for name in params:
            np.testing.assert_array_equal(ckpt.tensors[name], params[name])
            assert ckpt.tensors[name].dtype == np.float64
        assert ckpt.groups == groups
        assert set(ckpt.group(C.BASE)) == {"w1", "b1"}

    def test_save_load_save_identical_bytes(self, tmp_path):
        params, groups = sample_params()
        p1 = C.save_checkpoint(tmp_path / "a.ckpt", params, groups, {"k": 1})
        ckpt = C.load_checkpoint(p1)
        p2 = C.save_checkpoint(tmp_path / "b.ckpt", ckpt.tensors, ckpt.groups,
                               ckpt.config)
        assert p1.read_bytes() == p2.read_bytes()

    def test_insertion_order_irrelevant(self, tmp_path):
        params, groups = sample_params()
        rev = dict(reversed(list(params.items())))
        p1 = C.save_checkpoint(tmp_path / "a.ckpt", params, groups, {})
        p2 = C.save_checkpoint(tmp_path / "b.ckpt", rev, groups, {})
        assert p1.read_bytes() == p2.read_bytes()

    def test_groups_must_match_params(self, tmp_path):
        params, groups = sample_params()
        del groups["b1"]
        with pytest.raises(C.CheckpointError, match="same names"):
            C.save_checkpoint(tmp_path / "x.ckpt", params, groups, {})


class TestCorruption:
    def _saved(self, tmp_path):
        params, groups = sample_params()
        return C.save_checkpoint(tmp_path / "x.ckpt", params, groups, {})

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(C.CheckpointError, match="bad magic"):
            C.load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(C.CheckpointError, match="version 99"):
            C.load_checkpoint(path)

    def test_truncated_manifest(self, tmp_path):
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(C.CheckpointError, match="truncated manifest"):
            C.load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(C.CheckpointError, match="blob holds"):
            C.load_checkpoint(path)

    def test_flipped_byte_names_tensor_and_offset(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[-1] ^= 0xFF  # inside the last tensor's blob
        path.write_bytes(bytes(raw))
        with pytest.raises(C.CheckpointError, match="checksum mismatch") as e:
            C.load_checkpoint(path)
        msg = str(e.value)
        assert "'w1'" in msg and "offset" in msg  # w1 sorts last

    def test_overlapping_offsets(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        (mlen,) = struct.unpack("<Q", raw[8:16])
        manifest = json.loads(raw[16:16 + mlen])
        manifest["tensors"][1]["offset"] -= 8
        doc = json.dumps(manifest, sort_keys=True,
                         separators=(",", ":")).encode()
        path.write_bytes(raw[:8] + struct.pack("<Q", len(doc)) + doc
                         + raw[16 + mlen:])
        with pytest.raises(C.CheckpointError, match="overlap or gap"):
            C.load_checkpoint(path)

    def test_not_json(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        garbage = b"\xff" * 10
        path.write_bytes(raw[:8] + struct.pack("<Q", 10) + garbage
                         + raw[16:])
        with pytest.raises(C.CheckpointError, match="unreadable manifest"):
            C.load_checkpoint(path)


class TestModelIO:
    def test_full_model_round_trip(self, tmp_path):
        m = small_model(seed=3, with_adapter=True)
        path = C.save_model(tmp_path / "m.ckpt", m, {"d_model": 8})
        ckpt = C.load_checkpoint(path)
        assert ckpt.config == {"d_model": 8}
        fresh = small_model(seed=9, with_adapter=True)
        C.load_into_model(fresh, ckpt)
        for name, t in m.named_parameters():
            np.testing.assert_array_equal(
                t.data, dict(fresh.named_parameters())[name].data)

    def test_group_tags(self):
        m = small_model(with_adapter=True)
        groups = C.model_groups(m)
        assert groups["embeddings.token"] == C.BASE
        assert groups["pooler.w"] == C.POOLER
        assert groups["nsp.b"] == C.NSP_HEAD
        assert groups["adapter.prompt.w"] == C.ADAPTER
        assert groups["adapter.cal02.b"] == C.ADAPTER

    def test_adapter_only_checkpoint(self, tmp_path):
        m = small_model(seed=3, with_adapter=True)
        path = C.save_model(tmp_path / "ad.ckpt", m, {}, only_groups=[C.ADAPTER])
        ckpt = C.load_checkpoint(path)
        assert set(ckpt.groups.values()) == {C.ADAPTER}
        assert len(ckpt.tensors) == 7

    def test_base_plus_adapter_composition(self, tmp_path):
        # train-time split artifacts recompose into the original model
        donor = small_model(seed=3, with_adapter=True)
        base_path = C.save_model(tmp_path / "base.ckpt", donor, {},
                                 only_groups=[C.BASE, C.POOLER, C.NSP_HEAD])
        ad_path = C.save_model(tmp_path / "ad.ckpt", donor, {},
                               only_groups=[C.ADAPTER])
        target = small_model(seed=11, with_adapter=True)
        C.load_into_model(target, C.load_checkpoint(base_path))
        C.load_into_model(target, C.load_checkpoint(ad_path))
        for name, t in donor.named_parameters():
            np.testing.assert_array_equal(
                t.data, dict(target.named_parameters())[name].data)

    def test_missing_tensor_listed(self, tmp_path):
        m = small_model(with_adapter=True)
        path = C.save_model(tmp_path / "m.ckpt", m, {})
        bare = small_model()  # no adapter attached
        with pytest.raises(C.CheckpointError, match="adapter.prompt"):
            C.load_into_model(bare, C.load_checkpoint(path))

    def test_shape_mismatch_named(self, tmp_path):
        m = small_model()
        path = C.save_model(tmp_path / "m.ckpt", m, {})
        other = EncoderModel(
            ModelConfig(vocab_size=15, d_model=8, num_layers=2, num_heads=2,
                        ffn_dim=16, max_seq_len=10),
            np.random.default_rng(0))
        with pytest.raises(C.CheckpointError, match="shape mismatch.*ffn"):
            C.load_into_model(other, C.load_checkpoint(path))

    def test_only_groups_filter_on_load(self, tmp_path):
        donor = small_model(seed=3)
        path = C.save_model(tmp_path / "m.ckpt", donor, {})
        target = small_model(seed=11)
        before_nsp = target.parameters()["nsp.w"].data.copy()
        C.load_into_model(target, C.load_checkpoint(path),
                          only_groups=[C.BASE])
        np.testing.assert_array_equal(target.parameters()["nsp.w"].data,
                                      before_nsp)
        np.testing.assert_array_equal(
            target.parameters()["embeddings.token"].data,
            donor.parameters()["embeddings.token"].data)

"""Binary checkpoint format: round trips, canonical bytes, validation."""

import hashlib

import numpy as np
import pytest

from scriptid import checkpoint as ckpt
from scriptid.errors import (BadMagicError, IntegrityError, TensorMismatchError,
                             UnsupportedVersionError)
from scriptid.model import ModelConfig, init_params, named_tensors, state_tensors
from scriptid.trainer import TrainConfig, adam_init


def fresh(seed=0, variant="full", n_classes=3):
    config = ModelConfig.shrunken(n_classes, variant=variant)
    params = init_params(config, np.random.default_rng(seed), dtype=np.float32)
    return config, params


def save_kwargs(config):
    return dict(model_config=config, train_config=TrainConfig(),
                class_table=[f"script{i}" for i in range(config.n_classes)],
                channel_means=np.array([0.5, 0.49, 0.51], np.float32),
                iteration=17)


class TestRoundTrip:
    def test_tensors_bitwise_equal(self, tmp_path):
        config, params = fresh()
        path = tmp_path / "m.sidn"
        ckpt.save(path, params, **save_kwargs(config))
        loaded, adam, meta = ckpt.load(path)
        for (n, a), (_, b) in zip(named_tensors(params), named_tensors(loaded)):
            assert np.array_equal(a, b), n
        for (n, a), (_, b) in zip(state_tensors(params), state_tensors(loaded)):
            assert np.array_equal(a, b), n
        assert adam is None
        assert meta["iteration"] == 17
        assert meta["class_table"] == ["script0", "script1", "script2"]

    def test_same_state_same_bytes(self, tmp_path):
        config, params = fresh()
        p1, p2 = tmp_path / "a.sidn", tmp_path / "b.sidn"
        ckpt.save(p1, params, **save_kwargs(config))
        ckpt.save(p2, params, **save_kwargs(config))
        assert hashlib.sha256(p1.read_bytes()).digest() == \
               hashlib.sha256(p2.read_bytes()).digest()

    def test_save_load_save_identical(self, tmp_path):
        config, params = fresh(seed=2)
        p1, p2 = tmp_path / "a.sidn", tmp_path / "b.sidn"
        ckpt.save(p1, params, **save_kwargs(config))
        loaded, _, meta = ckpt.load(p1)
        ckpt.save(p2, loaded, model_config=ModelConfig.from_dict(meta["model_config"]),
                  train_config=ckpt.load_train_config(meta),
                  class_table=meta["class_table"],
                  channel_means=meta["channel_means"],
                  iteration=meta["iteration"])
        assert p1.read_bytes() == p2.read_bytes()

    def test_adam_state_round_trip(self, tmp_path):
        config, params = fresh(seed=3)
        adam = adam_init(params)
        rng = np.random.default_rng(1)
        for n in adam.m:
            adam.m[n][...] = rng.normal(size=adam.m[n].shape)
            adam.v[n][...] = rng.random(size=adam.v[n].shape)
        adam.t = 42
        path = tmp_path / "a.sidn"
        ckpt.save(path, params, adam_state=adam, **save_kwargs(config))
        _, loaded, _ = ckpt.load(path)
        assert loaded.t == 42
        for n in adam.m:
            assert np.array_equal(adam.m[n], loaded.m[n])
            assert np.array_equal(adam.v[n], loaded.v[n])

    @pytest.mark.parametrize("variant", ["variant1", "variant2"])
    def test_variant_round_trip(self, tmp_path, variant):
        config, params = fresh(variant=variant)
        path = tmp_path / "v.sidn"
        ckpt.save(path, params, **save_kwargs(config))
        loaded, _, meta = ckpt.load(path)
        assert meta["model_config"]["variant"] == variant
        assert np.array_equal(loaded.head.weights, params.head.weights)


class TestValidation:
    def _saved(self, tmp_path, **kw):
        config, params = fresh(**kw)
        path = tmp_path / "m.sidn"
        ckpt.save(path, params, **save_kwargs(config))
        return path

    def test_truncated_file(self, tmp_path):
        path = self._saved(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(IntegrityError):
            ckpt.load(path)

    def test_bad_magic(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            ckpt.load(path)

    def test_unsupported_version(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            ckpt.load(path)

    def test_class_count_gates_head_shape(self, tmp_path):
        # a 13-class checkpoint whose metadata claims 5 classes must not load
        config, params = fresh(n_classes=13)
        path = tmp_path / "m.sidn"
        ckpt.save(path, params, model_config=config, train_config=TrainConfig(),
                  class_table=[f"s{i}" for i in range(13)],
                  channel_means=[0.5, 0.5, 0.5])
        raw = path.read_bytes()
        # same-length edit keeps the metadata length header valid
        doctored = raw.replace(b'"n_classes":13', b'"n_classes":50', 1)
        assert doctored != raw and len(doctored) == len(raw)
        path.write_bytes(doctored)
        with pytest.raises(TensorMismatchError):
            ckpt.load(path)

    def test_missing_tensor(self, tmp_path):
        config, params = fresh()
        # drop one tensor by saving with a doctored walk
        import scriptid.checkpoint as cp

        path = tmp_path / "m.sidn"
        orig = cp.named_tensors
        cp.named_tensors = lambda p: orig(p)[1:]
        try:
            ckpt.save(path, params, **save_kwargs(config))
        finally:
            cp.named_tensors = orig
        with pytest.raises(TensorMismatchError) as err:
            ckpt.load(path)
        assert "encoder.conv1.kernels" in str(err.value)

    def test_stray_tensor_rejected(self, tmp_path):
        path = self._saved(tmp_path)
        raw = bytearray(path.read_bytes())
        # append a rogue tensor record and bump the tensor count
        import struct

        name = b"rogue.tensor"
        extra = struct.pack("<H", len(name)) + name + struct.pack("<B", 1)
        extra += struct.pack("<I", 2) + np.zeros(2, "<f4").tobytes()
        # tensor count lives right after the metadata block
        meta_len = struct.unpack("<I", raw[8:12])[0]
        count_at = 12 + meta_len
        count = struct.unpack("<I", raw[count_at : count_at + 4])[0]
        raw[count_at : count_at + 4] = struct.pack("<I", count + 1)
        raw += extra
        path.write_bytes(bytes(raw))
        with pytest.raises(TensorMismatchError):
            ckpt.load(path)

    def test_garbage_file(self, tmp_path):
        p = tmp_path / "g.sidn"
        p.write_bytes(b"SI")
        with pytest.raises(IntegrityError):
            ckpt.load(p)

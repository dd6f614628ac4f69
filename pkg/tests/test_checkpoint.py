"""Container format: round-trips, corruption detection, kind checks."""

import numpy as np
import pytest

from lesionforge.checkpoint import (
    CheckpointData,
    config_digest,
    load_checkpoint,
    load_into_store,
    save_checkpoint,
)
from lesionforge.errors import CheckpointError
from lesionforge.nn import ParameterStore
from lesionforge.optim import Optimizer, OptimizerConfig
from lesionforge.rng import RngState
from lesionforge.tensor import Tensor


def small_store(seed=0):
    store = ParameterStore()
    rng = RngState(seed)
    store.add("w", Tensor(rng.child("w").normal((3, 4)), requires_grad=True))
    store.add("b", Tensor(rng.child("b").normal((4,)), requires_grad=True))
    return store


class TestRoundTrip:
    def test_tensors_bit_exact(self, tmp_path):
        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        data = load_checkpoint(path)
        assert set(data.arrays) == {"w", "b"}
        for name, p in store.items():
            assert np.array_equal(data.arrays[name], p.data)

    def test_save_load_save_byte_identical(self, tmp_path):
        store = small_store()
        meta = {"config": {"lr": 0.1, "depth": 3}, "note": "x"}
        p1 = save_checkpoint(tmp_path / "a.ckpt", store, "test", meta=meta)
        data = load_checkpoint(p1)
        # rebuild a store from the loaded arrays and save again
        store2 = ParameterStore()
        for name in data.arrays:
            store2.add(name, Tensor(data.arrays[name], requires_grad=True))
        p2 = save_checkpoint(tmp_path / "b.ckpt", store2, data.model_kind,
                             meta=data.meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_optimizer_state_round_trip(self, tmp_path):
        store = small_store()
        opt = Optimizer(store, OptimizerConfig(kind="adam", lr=1e-2))
        for p in (store["w"], store["b"]):
            p.grad = np.ones(p.shape)
        opt.step()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test",
                               optimizer=opt)
        data = load_checkpoint(path)
        assert data.optimizer_step == 1
        assert set(data.optimizer_arrays) == {"m.w", "m.b", "v.w", "v.b"}
        opt2 = Optimizer(small_store(), OptimizerConfig(kind="adam", lr=1e-2))
        opt2.load_state(data.optimizer_step, data.optimizer_arrays)
        for name, arr in opt.state_arrays().items():
            assert np.array_equal(opt2.state_arrays()[name], arr)

    def test_meta_and_config_digest(self, tmp_path):
        store = small_store()
        cfg = {"dim": 8, "depth": 2}
        path = save_checkpoint(tmp_path / "m.ckpt", store, "vit", config=cfg)
        data = load_checkpoint(path)
        assert data.config == cfg
        assert data.digest == config_digest(cfg)
        assert config_digest({"depth": 2, "dim": 8}) == data.digest

    def test_load_into_store(self, tmp_path):
        store = small_store(seed=1)
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        fresh = small_store(seed=2)
        load_into_store(fresh, load_checkpoint(path))
        for name, p in store.items():
            assert np.array_equal(fresh[name].data, p.data)


class TestValidation:
    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "ghost.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "fake.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_payload_no_partial_load(self, tmp_path):
        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 20])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_corrupt_payload_fails_checksum(self, tmp_path):
        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0xFF  # flip a payload byte
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        import lesionforge.checkpoint as ck

        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        original = ck.FORMAT_VERSION
        try:
            ck.FORMAT_VERSION = 99
            with pytest.raises(CheckpointError, match="format version"):
                load_checkpoint(path)
        finally:
            ck.FORMAT_VERSION = original

    def test_model_kind_mismatch(self, tmp_path):
        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "diffusion")
        with pytest.raises(CheckpointError, match="'diffusion'.*'mae'"):
            load_checkpoint(path, expect_kind="mae")

    def test_name_mismatch_lists_offenders(self, tmp_path):
        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        other = ParameterStore()
        other.add("w", Tensor(np.zeros((3, 4)), requires_grad=True))
        other.add("extra", Tensor(np.zeros(2), requires_grad=True))
        with pytest.raises(CheckpointError) as err:
            load_into_store(other, load_checkpoint(path))
        msg = str(err.value)
        assert "extra" in msg and "b" in msg

    def test_shape_mismatch_rejected(self, tmp_path):
        store = small_store()
        path = save_checkpoint(tmp_path / "m.ckpt", store, "test")
        other = ParameterStore()
        other.add("w", Tensor(np.zeros((4, 3)), requires_grad=True))
        other.add("b", Tensor(np.zeros(4), requires_grad=True))
        with pytest.raises(CheckpointError, match="shape"):
            load_into_store(other, load_checkpoint(path))

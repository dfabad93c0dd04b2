"""Checkpoint container format, round trips, and corruption handling."""

import numpy as np
import pytest

from voicesep import checkpoint as ckpt
from voicesep.errors import CheckpointError
from voicesep.model import ModelConfig, init_params
from voicesep.embedder import EmbedderConfig, init_embedder
from voicesep.optim import Adam


SMALL = ModelConfig(n_filters=8, hidden=8, num_blocks=2, kernel_len=4,
                    num_speakers=2, chunk_len=6)


def test_raw_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3),
              "scalar": np.float32(0.25),
              "vec": np.array([1, 2, 3], dtype=np.float32)}
    p = tmp_path / "c.ckpt"
    ckpt.save_checkpoint(p, "separator", {"x": 1}, seed=7, step=42,
                         arrays=arrays)
    kind, config, seed, step, back = ckpt.load_checkpoint(p)
    assert (kind, config, seed, step) == ("separator", {"x": 1}, 7, 42)
    assert back["scalar"].shape == ()  # 0-d stays 0-d
    for name in arrays:
        np.testing.assert_array_equal(back[name], np.asarray(arrays[name]))


def test_save_is_byte_reproducible(tmp_path):
    arrays = {"b": np.ones(4, np.float32), "a": np.zeros((2, 2), np.float32)}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    ckpt.save_checkpoint(p1, "embedder", {}, 0, 0, arrays)
    ckpt.save_checkpoint(p2, "embedder", {}, 0, 0, dict(reversed(arrays.items())))
    assert p1.read_bytes() == p2.read_bytes()


def test_separator_round_trip_bit_exact(tmp_path):
    model = init_params(SMALL, seed=3)
    p = tmp_path / "m.ckpt"
    ckpt.save_separator(p, model, seed=3, step=10)
    back, seed, step, opt = ckpt.load_separator(p)
    assert (seed, step) == (3, 10)
    assert opt == {}
    for (n1, t1), (n2, t2) in zip(model.named_parameters(),
                                  back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data, t2.data)


def test_optimizer_state_round_trip(tmp_path):
    model = init_params(SMALL, seed=0)
    opt = Adam(model.named_parameters(), lr=1e-3)
    for _, t in model.named_parameters():
        t.grad = np.full_like(t.data, 0.1)
    opt.step()
    p = tmp_path / "m.ckpt"
    ckpt.save_separator(p, model, seed=0, step=1, optimizer=opt)
    back, _, _, state = ckpt.load_separator(p)
    opt2 = Adam(back.named_parameters(), lr=1e-3)
    opt2.load_state_arrays(state)
    assert opt2.t == opt.t
    for name in opt.m:
        np.testing.assert_array_equal(opt2.m[name], opt.m[name])
        np.testing.assert_array_equal(opt2.v[name], opt.v[name])


def test_embedder_round_trip(tmp_path):
    model = init_embedder(EmbedderConfig(n_classes=3), seed=5)
    p = tmp_path / "e.ckpt"
    ckpt.save_embedder(p, model, seed=5)
    back, seed, step = ckpt.load_embedder(p)
    assert (seed, step) == (5, 0)
    for (n1, t1), (_, t2) in zip(model.named_parameters(),
                                 back.named_parameters()):
        np.testing.assert_array_equal(t1.data, t2.data)


def test_kind_mismatch(tmp_path):
    model = init_params(SMALL, seed=0)
    p = tmp_path / "m.ckpt"
    ckpt.save_separator(p, model, seed=0, step=0)
    with pytest.raises(CheckpointError, match="expected embedder"):
        ckpt.load_embedder(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a checkpoint\n")
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        ckpt.load_checkpoint(tmp_path / "absent.ckpt")


def test_truncated_array(tmp_path):
    model = init_params(SMALL, seed=0)
    p = tmp_path / "m.ckpt"
    ckpt.save_separator(p, model, seed=0, step=0)
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        ckpt.load_checkpoint(p)


def test_trailing_bytes(tmp_path):
    model = init_params(SMALL, seed=0)
    p = tmp_path / "m.ckpt"
    ckpt.save_separator(p, model, seed=0, step=0)
    p.write_bytes(p.read_bytes() + b"\x00" * 4)
    with pytest.raises(CheckpointError, match="trailing"):
        ckpt.load_checkpoint(p)


def test_shape_mismatch_detected(tmp_path):
    model = init_params(SMALL, seed=0)
    p = tmp_path / "m.ckpt"
    arrays = {name: t.data for name, t in model.named_parameters()}
    name = max(arrays, key=lambda n: arrays[n].ndim)
    arrays[name] = arrays[name].reshape(-1)  # flatten one array
    ckpt.save_checkpoint(p, "separator", model.config.to_dict(), 0, 0, arrays)
    with pytest.raises(CheckpointError, match="shape"):
        ckpt.load_separator(p)


def test_unexpected_parameter_name(tmp_path):
    model = init_params(SMALL, seed=0)
    arrays = {name: t.data for name, t in model.named_parameters()}
    arrays["rogue"] = np.zeros(3, np.float32)
    p = tmp_path / "m.ckpt"
    ckpt.save_checkpoint(p, "separator", model.config.to_dict(), 0, 0, arrays)
    with pytest.raises(CheckpointError, match="do not match"):
        ckpt.load_separator(p)

import struct
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from logit_invert import checkpoint as ckpt
from logit_invert._validation import to_nchw
from logit_invert.trainer import (
    GanTrainConfig,
    ModelSpec,
    build_state,
    load_checkpoint,
    sample_real,
    save_checkpoint,
    train_step,
)

SPEC = ModelSpec(3, 1, n_z=12, g_channels=(8, 8, 8), d_channels=(8, 8, 8), embed_dim=8, cond_hidden=8)


@pytest.fixture
def trained_state(toy_data, tiny_classifier):
    s = build_state(GanTrainConfig(batch_size=4, ema_start=1, ema_decay=0.5), SPEC)
    images = to_nchw(toy_data[0])
    for _ in range(3):
        train_step(s, sample_real(s, images), tiny_classifier)
    return s, images


def handwritten_checkpoint():
    # One section "s" with one float32 record "w" of shape (2,) = [1.0, -2.0].
    out = b"LGTINV01" + bytes(range(32)) + struct.pack("<QI", 7, 1)
    out += struct.pack("<H", 1) + b"s" + struct.pack("<I", 1)
    out += struct.pack("<H", 1) + b"w" + struct.pack("<BB", 1, 1) + struct.pack("<Q", 2)
    out += struct.pack("<Q", 8) + struct.pack("<2f", 1.0, -2.0)
    return out


def test_decode_handwritten_file():
    digest, step, sections = ckpt.decode(handwritten_checkpoint())
    assert digest == bytes(range(32)) and step == 7
    np.testing.assert_array_equal(sections["s"]["w"], np.array([1.0, -2.0], np.float32))


def test_encode_matches_handwritten_layout():
    sections = {"s": {"w": np.array([1.0, -2.0], np.float32)}}
    assert ckpt.encode(bytes(range(32)), 7, sections) == handwritten_checkpoint()


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([np.float32, np.float64, np.int64, np.uint8, np.int32, np.float16, np.bool_]),
       st.lists(st.integers(0, 3), min_size=0, max_size=3), st.integers(0, 2**40))
def test_record_round_trip(dtype, shape, step):
    arr = np.arange(int(np.prod(shape)) if shape else 1).reshape(shape).astype(dtype)
    digest, back_step, sections = ckpt.decode(ckpt.encode(b"\x01" * 32, step, {"a": {"x": arr}}))
    assert back_step == step
    out = sections["a"]["x"]
    assert out.dtype == arr.dtype and out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)


def test_save_load_save_is_byte_identical(trained_state, tmp_path):
    s, _ = trained_state
    save_checkpoint(s, tmp_path / "a.ckpt")
    save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_load_restores_every_weight(trained_state, tmp_path):
    s, _ = trained_state
    back = load_checkpoint(save_checkpoint(s, tmp_path / "a.ckpt"))
    assert back.step == s.step == 3
    for name in ("generator", "generator_ema", "discriminator"):
        a, b = getattr(s, name).state_dict(), getattr(back, name).state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)
    assert torch.equal(s.rng.get_state(), back.rng.get_state())


def test_one_step_after_load_equals_one_step_without(trained_state, tmp_path, tiny_classifier):
    s, images = trained_state
    back = load_checkpoint(save_checkpoint(s, tmp_path / "a.ckpt"))
    row_a = train_step(s, sample_real(s, images), tiny_classifier)
    row_b = train_step(back, sample_real(back, images), tiny_classifier)
    assert row_a == row_b
    for a, b in zip(s.generator.parameters(), back.generator.parameters()):
        assert torch.equal(a, b)


def test_section_order_and_header(trained_state, tmp_path):
    s, _ = trained_state
    data = save_checkpoint(s, tmp_path / "a.ckpt").read_bytes()
    assert data[:8] == b"LGTINV01"
    assert data[8:40] == s.config_digest()
    digest, step, sections = ckpt.decode(data)
    assert list(sections) == ["meta", "generator", "discriminator", "generator_ema",
                              "opt_g", "opt_d", "rng"]
    assert "sn_u" in " ".join(sections["generator"])


def test_flipped_version_byte(trained_state, tmp_path):
    s, _ = trained_state
    data = bytearray(save_checkpoint(s, tmp_path / "a.ckpt").read_bytes())
    data[7] = ord("2")
    (tmp_path / "a.ckpt").write_bytes(bytes(data))
    with pytest.raises(ckpt.CheckpointVersionError):
        load_checkpoint(tmp_path / "a.ckpt")


def test_bad_magic():
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.decode(b"NOTCKPT1" + bytes(44))


@pytest.mark.parametrize("cut", [0, 5, 8, 39, 45, 60, -1])
def test_truncated_file(cut):
    data = handwritten_checkpoint()
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.decode(data[:cut] if cut >= 0 else data[:-1])


def test_trailing_bytes_rejected():
    with pytest.raises(ckpt.CheckpointFormatError):
        ckpt.decode(handwritten_checkpoint() + b"\x00")


def test_config_hash_mismatch_only_warns(trained_state, tmp_path):
    s, _ = trained_state
    path = save_checkpoint(s, tmp_path / "a.ckpt")
    other = build_state(GanTrainConfig(batch_size=8), SPEC)
    with pytest.warns(UserWarning):
        back = load_checkpoint(path, expected=other)
    assert back.step == 3
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        load_checkpoint(path, expected=s)


def test_config_hash_ignores_step_budget():
    a = build_state(GanTrainConfig(total_steps=5), SPEC)
    b = build_state(GanTrainConfig(total_steps=10), SPEC)
    c = build_state(GanTrainConfig(total_steps=10, lr_g=2e-4), SPEC)
    assert a.config_digest() == b.config_digest() != c.config_digest()


def test_write_is_atomic_and_unsupported_dtypes(tmp_path):
    ckpt.write(tmp_path / "x.ckpt", b"\x00" * 32, 1, {"a": {"x": np.zeros(2)}})
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]
    with pytest.raises(TypeError):
        ckpt.encode(b"\x00" * 32, 0, {"a": {"x": np.zeros(2, np.complex64)}})
    with pytest.raises(ValueError):
        ckpt.encode(b"\x00" * 31, 0, {})

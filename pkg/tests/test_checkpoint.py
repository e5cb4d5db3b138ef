import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from alloyforge.checkpoint import (
    ALIGN,
    MAGIC,
    REFERENCE_8B,
    BadMagicError,
    Checkpoint,
    CheckpointError,
    ConfigMismatchError,
    DuplicateNameError,
    ModelConfig,
    NonFiniteError,
    TruncatedError,
    VersionMismatchError,
    expected_shapes,
    from_bytes,
    read_checkpoint,
    tensor_stats,
    to_bytes,
    validate_against_config,
    write_checkpoint,
)
from helpers import random_checkpoint


def _header(buf):
    (n,) = struct.unpack("<Q", buf[8:16])
    return n, json.loads(buf[16 : 16 + n])


def _rebuild(header, payload):
    raw = json.dumps(header).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + payload


def test_roundtrip_file(tmp_path, rng):
    ck = random_checkpoint(rng)
    path = tmp_path / "a.ack"
    write_checkpoint(ck, path)
    back = read_checkpoint(path)
    assert back == ck
    assert list(back) == list(ck)


def test_empty_checkpoint_layout():
    buf = to_bytes(Checkpoint({}))
    assert buf[:8] == MAGIC
    n, header = _header(buf)
    assert header["tensors"] == []
    assert len(buf) == 16 + n
    assert from_bytes(buf) == Checkpoint({})


def test_repeated_writes_are_byte_identical(tmp_path, rng):
    ck = random_checkpoint(rng, max_tensors=8)
    write_checkpoint(ck, tmp_path / "1")
    write_checkpoint(ck.copy(), tmp_path / "2")
    h = [hashlib.sha256((tmp_path / n).read_bytes()).hexdigest() for n in ("1", "2")]
    assert h[0] == h[1]


def test_payload_alignment_and_little_endian():
    ck = Checkpoint({"a": np.array([1.0, 2.0], np.float32), "b": np.arange(5, dtype=np.float64) + 0.5})
    buf = to_bytes(ck)
    n, header = _header(buf)
    start = 16 + n
    assert start % ALIGN == 0
    for entry in header["tensors"]:
        assert entry["offset"] % ALIGN == 0
    b = header["tensors"][1]
    raw = buf[start + b["offset"] : start + b["offset"] + b["nbytes"]]
    assert struct.unpack("<5d", raw) == (0.5, 1.5, 2.5, 3.5, 4.5)
    assert header["tensors"][0]["dtype"] == "f32" and header["tensors"][1]["dtype"] == "f64"


def test_bad_magic():
    buf = bytearray(to_bytes(Checkpoint({"a": np.ones(3)})))
    buf[0:8] = b"NOTALLOY"
    with pytest.raises(BadMagicError):
        from_bytes(bytes(buf))


def test_version_mismatch():
    buf = to_bytes(Checkpoint({"a": np.ones(3)}))
    n, header = _header(buf)
    header["format_version"] = 99
    with pytest.raises(VersionMismatchError):
        from_bytes(_rebuild(header, buf[16 + n :]))


def test_truncated_payload():
    buf = to_bytes(Checkpoint({"a": np.ones(3)}))
    n, header = _header(buf)
    header["tensors"][0]["offset"] = 4096
    with pytest.raises(TruncatedError):
        from_bytes(_rebuild(header, buf[16 + n :]))
    with pytest.raises(TruncatedError):
        from_bytes(buf[: 16 + n + 8])


def test_truncated_index():
    buf = to_bytes(Checkpoint({"a": np.ones(3)}))
    with pytest.raises(TruncatedError):
        from_bytes(buf[:20])


def test_duplicate_name():
    buf = to_bytes(Checkpoint({"a": np.ones(3), "b": np.zeros(3)}))
    n, header = _header(buf)
    header["tensors"][1]["name"] = "a"
    with pytest.raises(DuplicateNameError):
        from_bytes(_rebuild(header, buf[16 + n :]))


def test_nonfinite_rejected_unless_flagged(tmp_path):
    bad = {"a": np.array([1.0, np.nan])}
    with pytest.raises(NonFiniteError):
        Checkpoint(bad)
    ck = Checkpoint(bad, allow_nonfinite=True)
    write_checkpoint(ck, tmp_path / "x")
    assert read_checkpoint(tmp_path / "x") == ck


@pytest.mark.parametrize(
    "tensors",
    [{"": np.ones(2)}, {"a": np.ones(2, dtype=np.int32)}, {"a": np.float64(1.0).reshape(())}, {"a": [1.0]}],
)
def test_invalid_records(tensors):
    with pytest.raises(CheckpointError):
        Checkpoint(tensors)


def test_model_config_invariants():
    with pytest.raises(CheckpointError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(CheckpointError):
        ModelConfig(n_heads=8, n_kv_heads=3)
    with pytest.raises(CheckpointError):
        ModelConfig(d_model=12, n_heads=4, n_kv_heads=2, d_ffn=8)  # head_dim 3 is odd
    with pytest.raises(CheckpointError):
        ModelConfig(rope_theta=1.0)


def test_reference_shape_ratios():
    toy = ModelConfig()
    assert REFERENCE_8B.d_ffn / REFERENCE_8B.d_model == toy.d_ffn / toy.d_model == 3.5
    assert REFERENCE_8B.n_heads // REFERENCE_8B.n_kv_heads == toy.n_heads // toy.n_kv_heads == 4
    assert toy.rope_theta == REFERENCE_8B.rope_theta == 500_000.0
    assert (REFERENCE_8B.n_layers, REFERENCE_8B.vocab_size, REFERENCE_8B.max_seq_len) == (32, 128_256, 131_072)


def test_validate_against_config(tiny_config):
    good = Checkpoint({k: np.zeros(s) for k, s in expected_shapes(tiny_config).items()}, tiny_config)
    validate_against_config(good, strict=True)
    bad = good.copy()
    bad.tensors["layers.0.attn.wq"] = np.zeros((tiny_config.d_model + 1, tiny_config.d_model))
    with pytest.raises(ConfigMismatchError, match="layers.0.attn.wq"):
        validate_against_config(bad)
    extra = good.copy()
    extra.tensors[f"layers.{tiny_config.n_layers}.attn.wq"] = np.zeros((16, 16))
    with pytest.raises(ConfigMismatchError):
        validate_against_config(extra)


def test_tensor_stats_cases():
    ck = Checkpoint({"z": np.zeros((3, 3)), "p": np.array([3.0, 4.0], np.float32)})
    assert tensor_stats(ck, "z") == {"min": 0.0, "max": 0.0, "mean": 0.0, "l2_norm": 0.0}
    assert tensor_stats(ck, "p")["l2_norm"] == 5.0
    with pytest.raises(KeyError):
        tensor_stats(ck, "missing")


def test_tensor_stats_against_second_pass(rng):
    x = rng.normal(size=(13, 7)).astype(np.float32)
    s = tensor_stats(Checkpoint({"x": x}), "x")
    vals = [float(v) for v in x.flat]
    total = 0.0
    sq = 0.0
    for v in vals:
        total += v
        sq += v * v
    assert s["min"] == min(vals) and s["max"] == max(vals)
    assert s["mean"] == pytest.approx(total / len(vals), rel=1e-12, abs=1e-15)
    assert s["l2_norm"] == pytest.approx(sq**0.5, rel=1e-12)


_arrays = st.one_of(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=st.floats(-1e6, 1e6, width=32)),
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=st.floats(-1e300, 1e300)),
)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), _arrays, max_size=5))
def test_roundtrip_property(tensors):
    ck = Checkpoint(tensors)
    back = from_bytes(to_bytes(ck))
    assert back == ck
    assert to_bytes(back) == to_bytes(ck)

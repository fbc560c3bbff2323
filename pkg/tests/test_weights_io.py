"""
Tests for the weight container and model configuration
"""

import json
import struct

import numpy as np
import pytest

from model_config import (
    ALIGNMENT, BadMagicError, HeadKind, ModelConfig, TensorShapeError, TruncatedWeightFileError,
    UnsupportedVersionError, WeightFileError, WeightStore, decode_weights, encode_weights,
    file_sha256, load_weights, save_weights,
)
from synthetic_weights import random_weights, tiny_config

PREAMBLE = struct.Struct("<4sIQ")


def rewrite_header(raw: bytes, mutate) -> bytes:
    """Re-pack a container after editing its JSON header"""
    magic, version, header_len = PREAMBLE.unpack_from(raw, 0)
    header_end = PREAMBLE.size + header_len
    data = raw[(header_end + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT:]
    header = json.loads(raw[PREAMBLE.size:header_end])
    mutate(header)
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    preamble = PREAMBLE.pack(magic, version, len(encoded))
    start = (len(preamble) + len(encoded) + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT
    return preamble + encoded + b"\0" * (start - len(preamble) - len(encoded)) + data


@pytest.fixture
def container():
    config = tiny_config()
    weights = random_weights(config, seed=5)
    return config, weights, encode_weights(config, weights)


def test_round_trip_is_byte_exact(container):
    config, weights, raw = container
    config2, weights2 = decode_weights(raw)
    assert config2 == config
    assert encode_weights(config2, weights2) == raw
    for (name, a), (_, b) in zip(weights.tensors(), weights2.tensors()):
        assert np.array_equal(a, b), name


def test_save_and_load(tmp_path, container):
    config, weights, raw = container
    path = tmp_path / "models" / "tiny.rpwt"
    save_weights(path, config, weights)
    assert path.read_bytes() == raw
    assert not (tmp_path / "models" / "tiny.rpwt.tmp").exists()

    loaded_config, loaded = load_weights(path)
    assert loaded_config == config
    assert not loaded.embedding.flags.writeable
    assert len(file_sha256(path)) == 64


def test_tensor_offsets_are_aligned(container):
    _, _, raw = container
    _, _, header_len = PREAMBLE.unpack_from(raw, 0)
    header = json.loads(raw[PREAMBLE.size:PREAMBLE.size + header_len])
    assert all(entry["offset"] % ALIGNMENT == 0 for entry in header["tensors"])
    assert [e["name"] for e in header["tensors"]][:2] == ["wte", "wpe"]


def test_bad_magic(container):
    _, _, raw = container
    with pytest.raises(BadMagicError) as err:
        decode_weights(b"XXXX" + raw[4:])
    assert err.value.code == "bad_magic"


def test_unsupported_version(container):
    _, _, raw = container
    corrupted = bytearray(raw)
    struct.pack_into("<I", corrupted, 4, 99)
    with pytest.raises(UnsupportedVersionError) as err:
        decode_weights(bytes(corrupted))
    assert err.value.code == "bad_version"


def test_truncated_file(container):
    _, _, raw = container
    with pytest.raises(TruncatedWeightFileError) as err:
        decode_weights(raw[:-10])
    assert err.value.code == "truncated"
    with pytest.raises(TruncatedWeightFileError):
        decode_weights(raw[:8])


def test_shape_mismatch_names_tensor(container):
    """Test header d=8 with a 9-column embedding is rejected by name"""
    _, _, raw = container

    def widen(header):
        for entry in header["tensors"]:
            if entry["name"] == "wte":
                entry["shape"] = [entry["shape"][0], 9]

    with pytest.raises(TensorShapeError) as err:
        decode_weights(rewrite_header(raw, widen))
    assert err.value.tensor_name == "wte"
    assert err.value.code == "shape_mismatch"
    assert "wte" in str(err.value)


@pytest.mark.parametrize("key", ["name", "shape", "offset"])
def test_directory_entry_missing_key(container, key):
    _, _, raw = container

    def drop(header):
        del header["tensors"][0][key]

    with pytest.raises(WeightFileError) as err:
        decode_weights(rewrite_header(raw, drop))
    assert "tensor entry 0" in str(err.value)


def test_misaligned_offset_is_rejected(container):
    """Test an offset shifted by 4 bytes is refused rather than read from the wrong bytes"""
    _, _, raw = container

    def shift(header):
        header["tensors"][1]["offset"] += 4

    with pytest.raises(WeightFileError, match="offset"):
        decode_weights(rewrite_header(raw, shift))


@pytest.mark.parametrize("offset", [-64, "64", 1.5])
def test_invalid_offset_is_rejected(container, offset):
    _, _, raw = container

    def replace_offset(header):
        header["tensors"][1]["offset"] = offset

    with pytest.raises(WeightFileError, match="offset"):
        decode_weights(rewrite_header(raw, replace_offset))


def test_from_tensors_reports_missing_tensor():
    config = tiny_config()
    tensors = dict(random_weights(config).tensors())
    del tensors["layers.2.mlp.w_out"]
    with pytest.raises(TensorShapeError, match="layers.2.mlp.w_out"):
        WeightStore.from_tensors(config, tensors)


def test_linear_head_round_trip():
    config = tiny_config(head_kind=HeadKind.LINEAR_HEAD)
    weights = random_weights(config, seed=2)
    raw = encode_weights(config, weights)
    config2, weights2 = decode_weights(raw)
    assert config2.head_kind == HeadKind.LINEAR_HEAD
    assert np.array_equal(weights.head_weight, weights2.head_weight)


def test_distinct_error_codes():
    codes = {cls.code for cls in (BadMagicError, UnsupportedVersionError, TensorShapeError, TruncatedWeightFileError)}
    assert len(codes) == 4
    assert all(issubclass(cls, WeightFileError)
               for cls in (BadMagicError, UnsupportedVersionError, TensorShapeError, TruncatedWeightFileError))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(n_layers=2, n_heads=3, d_model=8, d_inner=16, vocab_size=10, max_positions=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0, n_heads=1, d_model=8, d_inner=16, vocab_size=10, max_positions=4)
    config = ModelConfig.from_dict(tiny_config().to_dict())
    assert config.head_dim == 4


def test_astype_float64_copy():
    weights = random_weights(tiny_config(), seed=1)
    wide = weights.astype(np.float64)
    assert wide.dtype == np.float64
    assert np.allclose(wide.embedding, weights.embedding)


def test_freeze_marks_every_tensor_read_only(tmp_path):
    config = tiny_config()
    weights = random_weights(config, seed=2).freeze()
    assert all(not arr.flags.writeable for _, arr in weights.tensors())
    with pytest.raises(ValueError):
        weights.embedding[0, 0] = 1.0

    path = tmp_path / "frozen.rpwt"
    save_weights(path, config, random_weights(config, seed=2))
    _, loaded = load_weights(path)
    assert all(not arr.flags.writeable for _, arr in loaded.tensors())

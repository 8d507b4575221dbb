"""PNUW container: round trips, deterministic bytes, damage detection."""

import json
import struct
import zlib

import numpy as np
import pytest

from pnunet import model, weights

CFG = model.ReconstructorConfig(levels=2, base_channels=4, in_channels=1, seed=5)


def fresh_params():
    return model.init_reconstructor(CFG)


def test_round_trip_is_bit_exact(tmp_path):
    params = fresh_params()
    path = tmp_path / "m.pnuw"
    weights.save_weights(params, CFG, path)
    loaded, cfg = weights.load_weights(path)
    assert cfg == CFG
    assert list(loaded) == list(params)  # order preserved
    for name in params:
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], params[name])


def test_save_is_deterministic(tmp_path):
    params = fresh_params()
    a, b = tmp_path / "a.pnuw", tmp_path / "b.pnuw"
    weights.save_weights(params, CFG, a)
    weights.save_weights(params, CFG, b)
    assert a.read_bytes() == b.read_bytes()


def test_float64_tensors_are_cast(tmp_path):
    params = {k: v.astype(np.float64) for k, v in fresh_params().items()}
    path = tmp_path / "m.pnuw"
    weights.save_weights(params, CFG, path)
    loaded, _ = weights.load_weights(path)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name].astype(np.float32))


def test_header_layout(tmp_path):
    path = tmp_path / "m.pnuw"
    weights.save_weights(fresh_params(), CFG, path)
    blob = path.read_bytes()
    assert blob[:4] == b"PNUW"
    assert blob[4] == 1
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9 : 9 + hlen])
    assert header["config"]["levels"] == 2
    names = [t["name"] for t in header["tensors"]]
    assert "enc0/kernel" in names and "head/bias" in names


def test_single_corrupted_payload_byte_detected(tmp_path):
    path = tmp_path / "m.pnuw"
    weights.save_weights(fresh_params(), CFG, path)
    blob = bytearray(path.read_bytes())
    (hlen,) = struct.unpack_from("<I", blob, 5)
    pos = 9 + hlen + 17  # some byte well inside the payload
    blob[pos] ^= 0x01
    path.write_bytes(bytes(blob))
    with pytest.raises(weights.WeightCorruptionError, match="checksum"):
        weights.load_weights(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.pnuw"
    weights.save_weights(fresh_params(), CFG, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"JUNK"
    path.write_bytes(bytes(blob))
    with pytest.raises(weights.WeightFormatError, match="magic"):
        weights.load_weights(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "m.pnuw"
    weights.save_weights(fresh_params(), CFG, path)
    blob = bytearray(path.read_bytes())
    blob[4] = 2
    path.write_bytes(bytes(blob))
    with pytest.raises(weights.WeightFormatError, match="version"):
        weights.load_weights(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.pnuw"
    weights.save_weights(fresh_params(), CFG, path)
    blob = path.read_bytes()
    for cut in (3, 8, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises((weights.WeightFormatError, weights.WeightCorruptionError)):
            weights.load_weights(path)


def test_tensor_offset_past_payload_rejected(tmp_path):
    # a header claiming more payload than exists must not read out of bounds
    params = fresh_params()
    path = tmp_path / "m.pnuw"
    weights.save_weights(params, CFG, path)
    blob = bytearray(path.read_bytes())
    (hlen,) = struct.unpack_from("<I", blob, 5)
    header = json.loads(blob[9 : 9 + hlen])
    header["tensors"][-1]["offset"] += 8192
    raw = json.dumps(header, separators=(",", ":")).encode()
    new = blob[:5] + struct.pack("<I", len(raw)) + raw + blob[9 + hlen :]
    path.write_bytes(bytes(new))
    with pytest.raises(weights.WeightCorruptionError, match="past payload end"):
        weights.load_weights(path)


def test_garbage_header_rejected(tmp_path):
    path = tmp_path / "m.pnuw"
    payload = b"\x00" * 16
    crc = struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    header = b"this is not json"
    path.write_bytes(b"PNUW\x01" + struct.pack("<I", len(header)) + header + payload + crc)
    with pytest.raises(weights.WeightFormatError, match="malformed header"):
        weights.load_weights(path)


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "m.pnuw"
    path.write_bytes(b"")
    with pytest.raises(weights.WeightFormatError, match="too short"):
        weights.load_weights(path)


def test_loaded_params_run_forward(tmp_path):
    params = fresh_params()
    path = tmp_path / "m.pnuw"
    weights.save_weights(params, CFG, path)
    loaded, _ = weights.load_weights(path)
    x = np.random.default_rng(0).uniform(0, 1, (8, 8, 1)).astype(np.float32)
    np.testing.assert_array_equal(model.forward(loaded, x), model.forward(params, x))

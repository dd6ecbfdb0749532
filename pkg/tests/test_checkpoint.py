import os
import struct

import numpy as np
import pytest

from sdmae import checkpoint as ck
from sdmae.checkpoint import Checkpoint, load_arrays, load_checkpoint, save_arrays, save_checkpoint
from sdmae.errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    CorruptCheckpointError,
    DataError,
    FingerprintMismatchError,
    NumericError,
)


def _arrays(rng):
    return {
        "w": rng.standard_normal((3, 4)).astype(np.float32),
        "b": rng.standard_normal(5),
        "steps": np.arange(7, dtype=np.int64),
        "flags": np.array([True, False, True]),
        "bytes": np.arange(3, dtype=np.uint8),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }


def test_roundtrip_arrays_and_meta(tmp_path, rng):
    arrays = _arrays(rng)
    path = save_arrays(tmp_path / "a.ckpt", arrays, {"note": "x", "n": 3})
    back, meta = load_arrays(path)
    assert meta == {"note": "x", "n": 3}
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_save_load_save_byte_identical(tmp_path, rng):
    state = Checkpoint(params=_arrays(rng), optimizer={"w/exp_avg": np.ones(3)}, step=12, epoch=2, fingerprint="abc", model_config={"a": 1})
    p1 = save_checkpoint(state, tmp_path / "one.ckpt")
    p2 = save_checkpoint(load_checkpoint(p1), tmp_path / "two.ckpt")
    assert p1.read_bytes() == p2.read_bytes()


def test_data_section_aligned(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng))
    blob = path.read_bytes()
    _, _, mlen, _ = struct.unpack_from("<8sIQ32s", blob)
    import json

    manifest = json.loads(blob[52 : 52 + mlen])
    assert all(e["offset"] % 8 == 0 for e in manifest["arrays"])


def _corrupt(path, offset, value=None):
    blob = bytearray(path.read_bytes())
    blob[offset] = value if value is not None else blob[offset] ^ 0xFF
    path.write_bytes(bytes(blob))


def test_bad_magic(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng))
    _corrupt(path, 0)
    with pytest.raises(CorruptCheckpointError, match="magic"):
        load_arrays(path)


def test_tampered_manifest_byte(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng))
    _corrupt(path, 60)
    with pytest.raises(CorruptCheckpointError):
        load_arrays(path)


def test_tampered_data_byte(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng))
    _corrupt(path, len(path.read_bytes()) - 20)
    with pytest.raises(CorruptCheckpointError, match="data"):
        load_arrays(path)


def test_truncated(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng))
    path.write_bytes(path.read_bytes()[:20])
    with pytest.raises(CorruptCheckpointError):
        load_arrays(path)


def test_version_mismatch(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng))
    _corrupt(path, 8, 99)
    with pytest.raises(CheckpointVersionError):
        load_arrays(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "nope.ckpt")


def test_unsupported_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        save_arrays(tmp_path / "a.ckpt", {"c": np.ones(2, dtype=complex)})


def test_fingerprint_mismatch(tmp_path, rng):
    path = save_checkpoint(Checkpoint(params=_arrays(rng), fingerprint="aaa"), tmp_path / "a.ckpt")
    assert load_checkpoint(path, expected_fingerprint="aaa").fingerprint == "aaa"
    with pytest.raises(FingerprintMismatchError):
        load_checkpoint(path, expected_fingerprint="bbb")


def test_wrong_kind(tmp_path, rng):
    path = save_arrays(tmp_path / "a.ckpt", _arrays(rng), {"kind": "embedding_table"})
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_failed_write_keeps_old_file(tmp_path, rng, monkeypatch):
    path = save_arrays(tmp_path / "a.ckpt", {"x": np.ones(3)})
    original = path.read_bytes()

    def boom(src, dst):
        raise OSError(28, "No space left on device")

    monkeypatch.setattr(ck.os, "replace", boom)
    with pytest.raises(CheckpointError, match="could not write"):
        save_arrays(path, {"x": np.zeros(3)})
    assert path.read_bytes() == original
    assert sorted(os.listdir(tmp_path)) == ["a.ckpt"]


def test_exit_codes_distinct():
    codes = [e.exit_code for e in (ConfigError, DataError, NumericError, CheckpointError, CheckpointVersionError, CorruptCheckpointError, FingerprintMismatchError)]
    assert len(set(codes)) == len(codes) and 0 not in codes

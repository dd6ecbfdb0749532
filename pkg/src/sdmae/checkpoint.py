"""Single-file archive of named arrays with a versioned JSON manifest.

File layout (all integers little-endian)::

    magic            8 bytes   b"SDMAECK\\0"
    format version   uint32
    manifest length  uint64
    manifest sha256  32 bytes
    manifest         UTF-8 JSON (sorted keys, no whitespace)
    data             raw little-endian arrays, 8-byte aligned, at the
                     offsets listed in the manifest

The manifest records name, dtype, shape, offset and byte length of every
array, a sha256 of the data section and a free-form ``meta`` object.  Writes
go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import CheckpointError, CheckpointVersionError, CorruptCheckpointError, FingerprintMismatchError

MAGIC = b"SDMAECK\0"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")
_ALIGN = 8

PathLike = Union[str, os.PathLike]


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def save_arrays(path: PathLike, arrays: Mapping[str, np.ndarray], meta: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind not in "fiub":
            raise CheckpointError(f"array {name!r} has unsupported dtype {arr.dtype}")
        arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
        raw = arr.tobytes()
        pad = (-len(raw)) % _ALIGN
        entries.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw + b"\0" * pad)
        offset += len(raw) + pad
    data = b"".join(chunks)
    manifest = _canonical_json(
        {
            "format_version": FORMAT_VERSION,
            "arrays": entries,
            "data_sha256": hashlib.sha256(data).hexdigest(),
            "meta": meta or {},
        }
    )
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest), hashlib.sha256(manifest).digest())

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(manifest)
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise CheckpointError(f"could not write {path}: {exc}") from exc
    return path


def load_arrays(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"could not read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise CorruptCheckpointError(f"{path}: truncated header")
    magic, version, mlen, msha = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint archive (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    manifest_raw = blob[_HEADER.size : _HEADER.size + mlen]
    if len(manifest_raw) != mlen or hashlib.sha256(manifest_raw).digest() != msha:
        raise CorruptCheckpointError(f"{path}: manifest checksum mismatch")
    try:
        manifest = json.loads(manifest_raw)
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: manifest is not valid JSON") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: manifest declares version {manifest.get('format_version')}")
    data = blob[_HEADER.size + mlen :]
    if hashlib.sha256(data).hexdigest() != manifest["data_sha256"]:
        raise CorruptCheckpointError(f"{path}: data checksum mismatch")
    arrays = {}
    for e in manifest["arrays"]:
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise CorruptCheckpointError(f"{path}: array {e['name']!r} extends past end of file")
        arr = np.frombuffer(data[e["offset"] : end], dtype=np.dtype(e["dtype"]))
        arrays[e["name"]] = arr.reshape(tuple(e["shape"])).copy()
    return arrays, manifest["meta"]


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    fingerprint: str = ""
    model_config: Dict[str, Any] = field(default_factory=dict)
    train_config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(state: Checkpoint, path: PathLike) -> Path:
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"optim/{k}": v for k, v in state.optimizer.items()})
    arrays.update({f"extra/{k}": v for k, v in state.extra.items()})
    meta = {
        "kind": "checkpoint",
        "step": int(state.step),
        "epoch": int(state.epoch),
        "fingerprint": state.fingerprint,
        "model_config": state.model_config,
        "train_config": state.train_config,
    }
    return save_arrays(path, arrays, meta)


def load_checkpoint(path: PathLike, expected_fingerprint: Optional[str] = None) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "checkpoint":
        raise CorruptCheckpointError(f"{path}: archive holds {meta.get('kind')!r}, not a checkpoint")
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: config fingerprint {meta['fingerprint'][:12]} does not match {expected_fingerprint[:12]}"
        )

    def section(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    return Checkpoint(
        params=section("param/"),
        optimizer=section("optim/"),
        step=meta["step"],
        epoch=meta["epoch"],
        fingerprint=meta["fingerprint"],
        model_config=meta["model_config"],
        train_config=meta["train_config"],
        extra=section("extra/"),
    )

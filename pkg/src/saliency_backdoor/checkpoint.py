"""Checkpoint container for model parameters.

File layout (all integers little-endian):

    bytes 0..4    magic ``SSNR1``
    bytes 5..8    uint32 format version (currently 1)
    bytes 9..16   uint64 header length in bytes
    header        UTF-8 JSON: architecture, metadata, array directory,
                  payload sha256
    payload       raw array bytes, C-order, little-endian, concatenated in
                  directory order

The sha256 of the payload is stored in the header, so corruption is caught
even when the file length is plausible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import ArchitectureMismatchError, CorruptCheckpointError, VersionMismatchError
from .models import ModelAdapter, build_model

MAGIC = b"SSNR1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    format_version: int
    architecture_id: str
    parameters: Dict[str, np.ndarray]
    metadata: dict
    architecture: dict


def _architecture_record(model: ModelAdapter) -> dict:
    return {
        "architecture_id": model.architecture_id,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "conv_channels": list(model.info.conv_channels),
        "hidden_units": model.info.hidden_units,
    }


def save_checkpoint(model: ModelAdapter, path, metadata: Optional[dict] = None) -> Checkpoint:
    """Write the model's parameters to ``path``; returns the written record."""
    path = Path(path)
    params = model.get_parameters()
    directory = []
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = {
        "architecture": _architecture_record(model),
        "metadata": metadata or {},
        "arrays": directory,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return Checkpoint(
        format_version=FORMAT_VERSION,
        architecture_id=model.architecture_id,
        parameters=params,
        metadata=dict(metadata or {}),
        architecture=header["architecture"],
    )


def read_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint file without instantiating a model."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(MAGIC)
    (version,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, supported: {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    if len(blob) < offset + header_len:
        raise CorruptCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc
    offset += header_len
    payload = blob[offset:]
    expected = sum(
        int(np.dtype(a["dtype"]).itemsize) * int(np.prod(a["shape"], dtype=np.int64))
        for a in header["arrays"]
    )
    if len(payload) != expected:
        raise CorruptCheckpointError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CorruptCheckpointError(f"{path}: payload digest mismatch")
    params: Dict[str, np.ndarray] = {}
    cursor = 0
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        params[entry["name"]] = np.frombuffer(payload[cursor : cursor + nbytes], dtype=dtype).reshape(shape).copy()
        cursor += nbytes
    return Checkpoint(
        format_version=version,
        architecture_id=header["architecture"]["architecture_id"],
        parameters=params,
        metadata=header.get("metadata", {}),
        architecture=header["architecture"],
    )


def load_checkpoint(path, expected_architecture_id: Optional[str] = None) -> ModelAdapter:
    """Rebuild a model from a checkpoint file.

    Round trip with :func:`save_checkpoint` reproduces parameters
    bit-identically (they are stored and restored at their native dtype).
    """
    ckpt = read_checkpoint(path)
    arch = ckpt.architecture
    if expected_architecture_id is not None and ckpt.architecture_id != expected_architecture_id:
        raise ArchitectureMismatchError(
            f"{path}: checkpoint is {ckpt.architecture_id!r}, expected {expected_architecture_id!r}"
        )
    model = build_model(
        arch["architecture_id"],
        tuple(arch["input_shape"]),
        arch["class_count"],
        seed=0,
        conv_channels=arch["conv_channels"] or None,
        hidden_units=arch["hidden_units"],
    )
    try:
        model.set_parameters(ckpt.parameters)
    except Exception as exc:
        raise ArchitectureMismatchError(f"{path}: parameters do not fit the declared architecture") from exc
    return model

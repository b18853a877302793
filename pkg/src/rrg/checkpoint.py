"""Checkpoint serialization: JSON header plus little-endian float32 body.

Layout: 4-byte magic, u64 header length, canonical-JSON header, raw body.
The header carries a schema version, a config snapshot, the named-tensor
directory (name, shape, byte offset) and a SHA-256 of the body. Values are
stored as float32, so saving quantizes float64 training state; save(load(x))
reproduces x byte-for-byte.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptionError, DimensionError

_MAGIC = b"RRGC"
SCHEMA_VERSION = 1


def save_checkpoint(path, named_arrays, config, extra=None):
    """Write (name, array) pairs with a config snapshot; returns the path."""
    directory = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    body = b"".join(blobs)
    header = {
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "tensors": directory,
        "body_sha256": hashlib.sha256(body).hexdigest(),
    }
    if extra is not None:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(body)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (header dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint file")
    if len(blob) < 12:
        raise CorruptionError(f"{path}: truncated header")
    (header_len,) = struct.unpack_from("<Q", blob, 4)
    header_end = 12 + header_len
    if len(blob) < header_end:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:header_end])
    except json.JSONDecodeError as exc:
        raise CorruptionError(f"{path}: invalid header JSON ({exc})") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CorruptionError(
            f"{path}: schema version {header.get('schema_version')!r}, "
            f"expected {SCHEMA_VERSION}"
        )
    body = blob[header_end:]
    digest = hashlib.sha256(body).hexdigest()
    if digest != header["body_sha256"]:
        raise CorruptionError(f"{path}: body checksum mismatch")

    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(body):
            raise CorruptionError(f"{path}: tensor {entry['name']} overruns body")
        flat = np.frombuffer(body[start:end], dtype="<f4")
        tensors[entry["name"]] = flat.astype(np.float64).reshape(shape)
    return header, tensors


def save_model(path, model, extra=None):
    """Checkpoint every model parameter under its hierarchical name."""
    named = [(name, p.data) for name, p in model.named_parameters()]
    return save_checkpoint(path, named, model.config_snapshot(), extra=extra)


def restore_model(path, model):
    """Load tensors into an already-built model; names and shapes must match."""
    header, tensors = load_checkpoint(path)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        surplus = sorted(set(tensors) - set(params))
        raise CorruptionError(
            f"{path}: parameter names disagree with the model "
            f"(missing {missing[:3]}..., surplus {surplus[:3]}...)"
        )
    for name, arr in tensors.items():
        p = params[name]
        if p.data.shape != arr.shape:
            raise DimensionError(
                f"{name}: checkpoint shape {arr.shape} vs model {p.data.shape}"
            )
        p.data[:] = arr
    return header

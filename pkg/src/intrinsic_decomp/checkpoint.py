"""Binary checkpoint files.

Layout::

    magic  b"IDCKPT\\x00\\x00" (8 bytes) | version u32 LE | reserved u32
    manifest length u64 LE | manifest JSON (UTF-8)
    raw little-endian float32 arrays, concatenated

The manifest holds ``{"meta": ..., "tensors": [{"name", "shape", "offset"}]}``
with offsets relative to the start of the data section.
"""
import json
import struct

import numpy as np

MAGIC = b"IDCKPT\x00\x00"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_LEN = struct.Struct("<Q")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0))
        fh.write(_LEN.pack(len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(tensors, meta)``; tensors are float32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size + _LEN.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, _ = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = _LEN.unpack_from(raw, _HEADER.size)
    start = _HEADER.size + _LEN.size
    if len(raw) < start + n:
        raise CheckpointError("truncated manifest")
    manifest = json.loads(raw[start:start + n].decode("utf-8"))
    data = memoryview(raw)[start + n:]
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * count
        if end > len(data):
            raise CheckpointError(f"truncated data for tensor {e['name']}")
        arr = np.frombuffer(data[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    return tensors, manifest["meta"]

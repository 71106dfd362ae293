"""Versioned binary checkpoints.

Layout (documented here; all integers little-endian):

    bytes 0..4    magic b"DINC"
    bytes 4..8    format version, uint32 (currently 1)
    bytes 8..16   manifest length in bytes, uint64
    manifest      UTF-8 JSON: {"entries": [{"name", "offset", "length",
                  "shape"}, ...], "meta": {...}} where offset/length are in
                  bytes within the payload
    payload       concatenated flat float64 arrays, little-endian
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"DINC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays, meta=None):
    """arrays: ordered {name: ndarray}; stored as flat float64."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "offset": offset, "length": len(blob),
                        "shape": list(arr.shape)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"entries": entries, "meta": meta or {}},
                          sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns ({name: ndarray}, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    mlen = struct.unpack("<Q", raw[8:16])[0]
    manifest = json.loads(raw[16:16 + mlen].decode())
    payload = raw[16 + mlen:]
    arrays = {}
    for e in manifest["entries"]:
        buf = payload[e["offset"]:e["offset"] + e["length"]]
        if len(buf) != e["length"]:
            raise CheckpointError(f"truncated payload for {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).copy()
    return arrays, manifest["meta"]


def restore_into(net, arrays):
    """Write checkpoint arrays back into a supernet's parameter objects."""
    named = net.named_arrays()
    for name, arr in arrays.items():
        if name not in named:
            raise CheckpointError(f"unknown parameter {name!r}")
        if named[name].shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        named[name][...] = arr

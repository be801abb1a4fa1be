"""Named-tensor checkpoint container.

Layout::

    b"SPXTENS1" | u64 LE header length | UTF-8 JSON header | zero pad to 64 |
    tensor payloads (little-endian f32), each starting on a 64-byte boundary

The header lists ``{name, shape, dtype: "f32", offset}`` per tensor, where
``offset`` counts from the start of the payload region, plus the config
fingerprint. Step, dev metric, label sets and other metadata live in the
``<file>.meta.json`` sidecar, which repeats the fingerprint.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, FingerprintMismatch, IoError
from .training import Checkpoint

MAGIC = b"SPXTENS1"
ALIGN = 64


def _pad(n):
    return (-n) % ALIGN


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_tensors(path, tensors: dict, fingerprint: str, meta: dict | None = None) -> None:
    entries, offset = [], 0
    payloads = []
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset})
        blob = arr.tobytes()
        payloads.append(blob + b"\0" * _pad(len(blob)))
        offset += len(payloads[-1])
    header = json.dumps({"fingerprint": fingerprint, "tensors": entries},
                        separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(header)) + header
    head += b"\0" * _pad(len(head))
    sidecar = dict(meta or {})
    sidecar["fingerprint"] = fingerprint
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(head + b"".join(payloads))
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_tensors(path):
    """Returns ``(tensors, meta)``; refuses a sidecar whose fingerprint disagrees."""
    path = Path(path)
    try:
        raw = path.read_bytes()
        meta = json.loads(sidecar_path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a tensor container")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen + _pad(16 + hlen)
    tensors = {}
    for entry in header["tensors"]:
        if entry["dtype"] != "f32":
            raise DataError(f"{path}: unsupported dtype {entry['dtype']}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(raw):
            raise DataError(f"{path}: tensor {entry['name']} runs past end of file")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    if meta.get("fingerprint") != header["fingerprint"]:
        raise FingerprintMismatch(f"{path}: sidecar fingerprint does not match container")
    return tensors, meta


def write_checkpoint(path, ck: Checkpoint) -> None:
    write_tensors(path, ck.tensors, ck.fingerprint,
                  {"step": ck.step, "dev_metric": ck.dev_metric, "label_sets": ck.label_sets})


def read_checkpoint(path) -> Checkpoint:
    tensors, meta = read_tensors(path)
    return Checkpoint(tensors, int(meta["step"]), meta.get("dev_metric"), meta["fingerprint"],
                      meta.get("label_sets", {}))

"""Fingerprints and named seed streams."""

import hashlib
import json

SEED_MASK = (1 << 63) - 1


def fingerprint(obj) -> str:
    """Stable 16-hex-digit digest of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def derive_seed(master: int, stream: str) -> int:
    """``master`` XOR a hash of the stream name, so stages get independent streams."""
    digest = hashlib.sha256(stream.encode("utf-8")).digest()
    return (int(master) ^ int.from_bytes(digest[:8], "little")) & SEED_MASK

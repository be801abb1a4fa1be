"""Utterance manifests as JSON Lines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .errors import DataError, IoError

FIELDS = ("utt_id", "path", "label", "group_id", "duration_s")


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    path: str
    label: str
    group_id: str
    duration_s: float


def write_manifest(records, path) -> None:
    lines = [json.dumps(asdict(r), ensure_ascii=False) for r in records]
    try:
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path, check_paths: bool = True) -> list[UtteranceRecord]:
    """Load and validate a manifest; relative audio paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    records, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if set(obj) != set(FIELDS):
            raise DataError(f"{path}:{lineno}: fields must be exactly {FIELDS}")
        rec = UtteranceRecord(str(obj["utt_id"]), str(obj["path"]), str(obj["label"]),
                              str(obj["group_id"]), float(obj["duration_s"]))
        if rec.utt_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate utt_id {rec.utt_id!r}")
        if rec.duration_s <= 0:
            raise DataError(f"{path}:{lineno}: duration_s must be positive")
        if check_paths and not (path.parent / rec.path).is_file():
            raise DataError(f"{path}:{lineno}: audio file {rec.path!r} not found")
        seen.add(rec.utt_id)
        records.append(rec)
    return records

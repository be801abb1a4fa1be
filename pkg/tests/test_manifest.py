import json

import pytest

from speechengine.errors import DataError, IoError
from speechengine.manifest import UtteranceRecord, read_manifest, write_manifest


def recs(tmp_path, n=3):
    out = []
    for i in range(n):
        (tmp_path / f"u{i}.wav").write_bytes(b"")
        out.append(UtteranceRecord(f"u{i}", f"u{i}.wav", "a" if i % 2 else "b", f"s{i}", 1.5))
    return out


def test_round_trip(tmp_path):
    r = recs(tmp_path)
    write_manifest(r, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl") == r


def test_unicode_labels(tmp_path):
    r = [UtteranceRecord("x", "x.wav", "ärger", "spk", 2.0)]
    write_manifest(r, tmp_path / "m.jsonl")
    assert read_manifest(tmp_path / "m.jsonl", check_paths=False) == r


@pytest.mark.parametrize("mutate, message", [
    (lambda o: o.pop("label"), "fields"),
    (lambda o: o.update(extra=1), "fields"),
    (lambda o: o.update(duration_s=0), "positive"),
    (lambda o: o.update(path="missing.wav"), "not found"),
])
def test_rejects_bad_line(tmp_path, mutate, message):
    objs = [{"utt_id": "a", "path": "a.wav", "label": "x", "group_id": "g", "duration_s": 1.0}]
    (tmp_path / "a.wav").write_bytes(b"")
    mutate(objs[0])
    (tmp_path / "m.jsonl").write_text(json.dumps(objs[0]) + "\n")
    with pytest.raises(DataError, match=message):
        read_manifest(tmp_path / "m.jsonl")


def test_duplicates_and_syntax(tmp_path):
    line = json.dumps({"utt_id": "a", "path": "a", "label": "x", "group_id": "g",
                       "duration_s": 1.0})
    (tmp_path / "dup.jsonl").write_text(line + "\n" + line + "\n")
    with pytest.raises(DataError, match="duplicate"):
        read_manifest(tmp_path / "dup.jsonl", check_paths=False)
    (tmp_path / "bad.jsonl").write_text("\n{not json\n")
    with pytest.raises(DataError, match=":2:"):
        read_manifest(tmp_path / "bad.jsonl")
    with pytest.raises(IoError):
        read_manifest(tmp_path / "absent.jsonl")

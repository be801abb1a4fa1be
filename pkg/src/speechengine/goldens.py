"""Golden-fixture drift guard.

A fixture directory holds ``cases.json`` (name, oracle, input, expected,
tolerance, provenance), the inputs, the expected outputs, and ``oracles.py``,
a standalone script that recomputes every expected output by brute force.
"""

from __future__ import annotations

import importlib.util
import json
import math
from pathlib import Path

from .errors import OracleMismatch

PROVENANCE_TAGS = ("PAPER", "TRIVIAL", "DERIVED")


def load_oracles(fixture_dir):
    path = Path(fixture_dir) / "oracles.py"
    spec = importlib.util.spec_from_file_location("_golden_oracles", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def load_cases(fixture_dir) -> list[dict]:
    return json.loads((Path(fixture_dir) / "cases.json").read_text())


def _close(a, b, tol) -> bool:
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(_close(a[k], b[k], tol) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(_close(x, y, tol) for x, y in zip(a, b))
    if isinstance(a, (int, float)) and isinstance(b, (int, float)) \
            and not isinstance(a, bool) and not isinstance(b, bool):
        return math.isclose(a, b, rel_tol=0.0, abs_tol=tol) or a == b
    return a == b


def regenerate_goldens(fixture_dir, write: bool = False) -> list[str]:
    """Recompute every case with its oracle and compare against the stored output.

    Missing expected files are created. A stored value that disagrees beyond
    the case tolerance raises OracleMismatch, unless ``write`` is set, in
    which case it is overwritten. Returns the names of cases whose files were
    written.
    """
    root = Path(fixture_dir)
    oracles = load_oracles(root)
    written = []
    for case in load_cases(root):
        name = case["name"]
        tag = case.get("provenance", "").split(":")[0].strip()
        if tag not in PROVENANCE_TAGS:
            raise OracleMismatch(f"case {name} has no provenance tag", case=name)
        try:
            fresh = oracles.compute(case, root)
        except Exception as exc:  # a corrupted input is drift too
            raise OracleMismatch(f"case {name}: oracle failed: {exc}", case=name) from exc
        path = root / case["expected"]
        if path.exists() and not write:
            try:
                stored = json.loads(path.read_text())
            except (ValueError, UnicodeDecodeError) as exc:
                raise OracleMismatch(f"case {name}: unreadable expected output", case=name) \
                    from exc
            if not _close(fresh, stored, case["tolerance"]):
                raise OracleMismatch(f"case {name}: stored {stored} but oracle gives {fresh}",
                                     case=name)
            continue
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(fresh) + "\n")
        written.append(name)
    return written

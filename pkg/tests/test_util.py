from hypothesis import given
from hypothesis import strategies as st

from speechengine.util import SEED_MASK, derive_seed, fingerprint


def test_fingerprint_ignores_key_order():
    assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})
    assert fingerprint({"a": 1}) != fingerprint({"a": 2})
    assert len(fingerprint(None)) == 16


@given(st.integers(0, SEED_MASK), st.text(max_size=20))
def test_seed_streams(master, name):
    s = derive_seed(master, name)
    assert 0 <= s <= SEED_MASK
    assert s == derive_seed(master, name)
    assert s != derive_seed(master, name + "x")

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lsmkv.core import (
    Entry,
    KeyRange,
    Op,
    compare_entries,
    decode_record,
    encode_entry,
    equal_width_boundaries,
    ranges_intersect,
    split_records,
    validate_key,
)
from lsmkv.errors import InvalidKey

keys = st.binary(min_size=1, max_size=12)
entries = st.builds(Entry.put, keys, st.integers(0, 2**64 - 1), st.binary(max_size=20))


@pytest.mark.parametrize(
    "a, b, expected",
    [
        (Entry.put(b"a", 5, b""), Entry.put(b"b", 1, b""), -1),
        (Entry.put(b"a", 5, b""), Entry.put(b"a", 9, b""), 1),
        (Entry.put(b"a", 5, b""), Entry.put(b"a", 5, b""), 0),
    ],
)
def test_compare_entries_examples(a, b, expected):
    assert compare_entries(a, b) == expected


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((b"a", b"c"), (b"c", b"f"), True),
        ((b"a", b"b"), (b"c", b"d"), False),
        ((b"a", b"z"), (b"m", b"n"), True),
    ],
)
def test_ranges_intersect_examples(a, b, expected):
    assert ranges_intersect(KeyRange(*a), KeyRange(*b)) is expected


def test_key_range_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        KeyRange(b"b", b"a")


@pytest.mark.parametrize("bad", [b"", b"x" * 1025, "text"])
def test_validate_key_rejects(bad):
    with pytest.raises(InvalidKey):
        validate_key(bad)


def test_validate_key_accepts_bounds():
    assert validate_key(b"\x00") == b"\x00"
    assert validate_key(b"k" * 1024) == b"k" * 1024


def test_delete_entry_has_no_value():
    e = Entry.delete(b"k", 3)
    assert e.is_delete and e.value == b"" and e.op == Op.DELETE


@given(entries, entries)
def test_compare_is_antisymmetric(a, b):
    assert compare_entries(a, b) == -compare_entries(b, a)


@given(entries, entries, entries)
def test_compare_is_transitive(a, b, c):
    x, y, z = sorted([a, b, c], key=lambda e: (e.key, -e.seq))
    assert compare_entries(x, y) <= 0 and compare_entries(y, z) <= 0
    assert compare_entries(x, z) <= 0


@given(entries, entries)
def test_compare_equal_only_on_identity(a, b):
    assert (compare_entries(a, b) == 0) == (a.key == b.key and a.seq == b.seq)


@given(st.tuples(keys, keys), st.tuples(keys, keys))
def test_intersect_symmetric(a, b):
    ra, rb = KeyRange(*sorted(a)), KeyRange(*sorted(b))
    assert ranges_intersect(ra, rb) == ranges_intersect(rb, ra)


@given(st.lists(st.one_of(entries, st.builds(Entry.delete, keys, st.integers(0, 2**64 - 1))), max_size=20))
def test_record_round_trip(es):
    buf = b"".join(encode_entry(e) for e in es)
    ks, recs = split_records(buf)
    assert ks == [e.key for e in es]
    assert [decode_record(r) for r in recs] == es


@pytest.mark.parametrize("regions", [1, 2, 4, 7])
def test_region_boundaries_are_sorted(regions):
    b = equal_width_boundaries(regions, b"user")
    assert len(b) == regions - 1
    assert b == sorted(b)

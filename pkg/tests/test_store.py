import collections

import pytest
from hypothesis import given, strategies as st

from htapsim.store import Predicate, SegmentStore, StoreError, TableDef, route


class TestRoute:
    @given(st.integers(-1000, 1000), st.integers(1, 16))
    def test_deterministic(self, key, n):
        assert route(key, n) == route(key, n)
        assert 0 <= route(key, n) < n

    def test_single_segment(self):
        for key in range(50):
            assert route(key, 1) == 0

    def test_keys_spread_over_segments(self):
        counts = collections.Counter(route(k, 3) for k in range(1, 101))
        assert set(counts) == {0, 1, 2}
        # chi-square against uniform at desk scale: generous 95% bound
        expected = 100 / 3
        chi2 = sum((counts[s] - expected) ** 2 / expected for s in range(3))
        assert chi2 < 5.99

    def test_zero_segments_rejected(self):
        with pytest.raises(ValueError):
            route(1, 0)


class TestTableDef:
    def test_distribution_key_must_be_a_column(self):
        with pytest.raises(StoreError):
            TableDef("t", dist_key="c9")

    def test_default_two_int_columns(self):
        t = TableDef("t")
        assert t.columns == ("c1", "c2")
        assert t.dist_key == "c1"


class TestPredicate:
    def test_conjunction(self):
        p = Predicate({"c1": 3, "c2": 7})
        assert p.matches((3, 7), ("c1", "c2"))
        assert not p.matches((3, 8), ("c1", "c2"))

    def test_empty_matches_all(self):
        assert Predicate().matches((1, 2), ("c1", "c2"))

    def test_pinned_key(self):
        t = TableDef("t")
        assert Predicate({"c1": 5}).pinned_key(t) == 5
        assert Predicate({"c2": 5}).pinned_key(t) is None


def everything_visible(version):
    return version.xmax_local == 0


class TestVersionChains:
    def test_insert_scan_roundtrip(self):
        store = SegmentStore(0)
        store.create_table(TableDef("t"))
        store.insert_version("t", (1, 10), local_xid=1, cid=1)
        store.insert_version("t", (2, 20), local_xid=1, cid=1)
        rows = store.scan(TableDef("t"), Predicate(), everything_visible)
        assert [v.values for _, v in rows] == [(1, 10), (2, 20)]

    def test_stamp_appends_successor(self):
        store = SegmentStore(0)
        store.create_table(TableDef("t"))
        ctid = store.insert_version("t", (1, 10), local_xid=1, cid=1)
        slot = ctid[1]
        victim = store.chain("t", slot)[0]
        successor = store.stamp_and_append("t", slot, victim, (1, 99), 2, 1)
        chain = store.chain("t", slot)
        assert chain == [victim, successor]
        assert victim.xmax_local == 2
        assert successor.xmin_local == 2
        assert successor.values == (1, 99)
        assert successor.ctid == victim.ctid

    def test_chain_linearity_audit(self):
        store = SegmentStore(0)
        store.create_table(TableDef("t"))
        ctid = store.insert_version("t", (1, 10), 1, 1)
        slot = ctid[1]
        store.stamp_and_append("t", slot, store.chain("t", slot)[0], (1, 11), 2, 1)
        states = {1: "committed", 2: "in_progress"}
        store.check_chain_invariants(lambda lx: states.get(lx, "aborted"))

    def test_visible_version_picks_newest_accepted(self):
        store = SegmentStore(0)
        store.create_table(TableDef("t"))
        ctid = store.insert_version("t", (1, 10), 1, 1)
        slot = ctid[1]
        store.stamp_and_append("t", slot, store.chain("t", slot)[0], (1, 11), 2, 1)
        old_only = lambda v: v.xmin_local == 1
        newest = lambda v: True
        assert store.visible_version("t", slot, old_only).values == (1, 10)
        assert store.visible_version("t", slot, newest).values == (1, 11)
        assert store.visible_version("t", slot, lambda v: False) is None

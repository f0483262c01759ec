"""Per-segment in-memory MVCC heap with hash distribution.

Tables have two integer columns (c1, c2) and are distributed by one of them.
Each row is a version chain keyed by a stable ctid; updates stamp the visible
version with the updater's local xid and append a successor.  All blocking
behavior (tuple locks, transaction-lock waits) lives in the simulator; the
store itself is passive data plus pure scan/stamp operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class StoreError(Exception):
    pass


@dataclass(frozen=True)
class TableDef:
    name: str
    columns: tuple[str, str] = ("c1", "c2")
    dist_key: str = "c1"

    def __post_init__(self):
        if self.dist_key not in self.columns:
            raise StoreError(
                f"distribution key {self.dist_key!r} is not a column of {self.name}"
            )


def route(key_value: int, n_segments: int) -> int:
    """Map a distribution-key value to its owning segment.

    Identity hash modulo segment count: deterministic, stable and balanced
    for the integer keys the scenarios use.
    """
    if n_segments < 1:
        raise ValueError("need at least one segment")
    return key_value % n_segments


@dataclass
class TupleVersion:
    values: tuple[int, int]
    xmin_local: int
    cmin: int
    ctid: tuple[str, int]  # (table, slot) on this segment
    xmax_local: int = 0
    cmax: int = 0


@dataclass
class Predicate:
    """Conjunction of column equalities; empty means match-all."""

    eqs: dict[str, int] = field(default_factory=dict)

    def matches(self, values: tuple[int, int], columns: tuple[str, str]) -> bool:
        for col, want in self.eqs.items():
            if values[columns.index(col)] != want:
                return False
        return True

    def pinned_key(self, table: TableDef) -> int | None:
        """The distribution-key value if the predicate fixes one, else None."""
        return self.eqs.get(table.dist_key)

    def __str__(self) -> str:
        if not self.eqs:
            return "true"
        return " and ".join(f"{c}={v}" for c, v in sorted(self.eqs.items()))


class SegmentStore:
    """Heap storage of one segment: table -> slot -> version chain."""

    def __init__(self, segment: int):
        self.segment = segment
        self.tables: dict[str, dict[int, list[TupleVersion]]] = {}
        self._next_slot: dict[str, int] = {}

    def create_table(self, table: TableDef) -> None:
        self.tables.setdefault(table.name, {})
        self._next_slot.setdefault(table.name, 0)

    def insert_version(
        self, table: str, values: tuple[int, int], local_xid: int, cid: int
    ) -> tuple[str, int]:
        slot = self._next_slot[table]
        self._next_slot[table] = slot + 1
        ctid = (table, slot)
        self.tables[table][slot] = [
            TupleVersion(values=values, xmin_local=local_xid, cmin=cid, ctid=ctid)
        ]
        return ctid

    def chain(self, table: str, slot: int) -> list[TupleVersion]:
        return self.tables[table][slot]

    def visible_version(self, table: str, slot: int, is_visible) -> TupleVersion | None:
        """Newest version of the chain that `is_visible` accepts."""
        for version in reversed(self.tables[table][slot]):
            if is_visible(version):
                return version
        return None

    def scan(self, table_def: TableDef, pred: Predicate, is_visible):
        """Yield (slot, version) for visible rows matching the predicate."""
        out = []
        table = table_def.name
        for slot in sorted(self.tables.get(table, {})):
            version = self.visible_version(table, slot, is_visible)
            if version is not None and pred.matches(version.values, table_def.columns):
                out.append((slot, version))
        return out

    def stamp_and_append(
        self,
        table: str,
        slot: int,
        victim: TupleVersion,
        new_values: tuple[int, int],
        local_xid: int,
        cid: int,
    ) -> TupleVersion:
        """Mark `victim` deleted by local_xid and append the successor version."""
        victim.xmax_local = local_xid
        victim.cmax = cid
        successor = TupleVersion(
            values=new_values,
            xmin_local=local_xid,
            cmin=cid,
            ctid=(table, slot),
        )
        self.tables[table][slot].append(successor)
        return successor

    def check_chain_invariants(self, local_state) -> None:
        """At most one in-progress successor per chain; stamps form a chain."""
        for table in sorted(self.tables):
            for slot in sorted(self.tables[table]):
                chain = self.tables[table][slot]
                uncommitted = [
                    v for v in chain if local_state(v.xmin_local) == "in_progress"
                ]
                if len(uncommitted) > 1:
                    raise AssertionError(
                        f"chain {table}:{slot} has {len(uncommitted)} in-progress versions"
                    )
                for prev, nxt in zip(chain, chain[1:]):
                    if prev.xmax_local == 0:
                        raise AssertionError(
                            f"chain {table}:{slot}: successor without stamped xmax"
                        )

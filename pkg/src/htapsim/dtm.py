"""Distributed transaction management.

The coordinator hands out distributed xids (dxids) and distributed snapshots;
segments keep a local-xid -> dxid mapping that is truncated up to the oldest
dxid any live snapshot can still see as running.  Tuple visibility combines
the distributed snapshot with that mapping, falling back to local state for
truncated entries.  Commit protocol choreography runs on the simulator's
event loop; this module owns the state, the planning rule (read-only / one-
phase / two-phase) and the message/fsync accounting.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum


class IntegrityError(Exception):
    """A local xid above the truncation horizon has no dxid mapping."""


class TxnState(Enum):
    ACTIVE = "active"
    PREPARING = "preparing"
    COMMITTING = "committing"
    COMMITTED = "committed"
    ABORTED = "aborted"


@dataclass(frozen=True)
class DistributedSnapshot:
    """In-progress dxid list plus the largest committed dxid at creation."""

    in_progress: frozenset[int]
    max_committed: int

    def dxid_visible(self, dxid: int, committed: bool) -> bool:
        return (
            committed
            and dxid not in self.in_progress
            and dxid <= self.max_committed
        )


@dataclass
class TransactionDescriptor:
    dxid: int
    begin_tick: int
    snapshot: DistributedSnapshot
    state: TxnState = TxnState.ACTIVE
    local_xids: dict[int, int] = field(default_factory=dict)  # segment -> local xid
    write_segments: set[int] = field(default_factory=set)
    command_id: int = 0  # bumped once per statement

    def local_xid(self, segment: int) -> int | None:
        return self.local_xids.get(segment)

    def is_finished(self) -> bool:
        return self.state in (TxnState.COMMITTED, TxnState.ABORTED)


class Protocol(Enum):
    READ_ONLY = "ro"
    ONE_PHASE = "1pc"
    TWO_PHASE = "2pc"


# message types counted by CommitAccounting
MSG_PREPARE = "Prepare"
MSG_PREPARE_OK = "PrepareOk"
MSG_COMMIT = "Commit"
MSG_COMMIT_OK = "CommitOk"
# fsync sites
FSYNC_SEGMENT_PREPARE = "SegmentPrepare"
FSYNC_COORD_COMMIT = "CoordinatorCommit"
FSYNC_SEGMENT_COMMIT = "SegmentCommit"


@dataclass
class CommitAccounting:
    messages: Counter = field(default_factory=Counter)
    fsyncs: Counter = field(default_factory=Counter)
    protocol: Protocol | None = None
    latency_ticks: int = 0

    def count_message(self, kind: str) -> None:
        self.messages[kind] += 1

    def count_fsync(self, site: str) -> None:
        self.fsyncs[site] += 1


class XidMapping:
    """Per-segment map from local xid to dxid, with truncation.

    Truncated entries keep a tombstone so that lookups can tell "fall back to
    local visibility" apart from "mapping was never recorded", which is an
    integrity error.
    """

    def __init__(self, segment: int):
        self.segment = segment
        self.entries: dict[int, int] = {}
        self.truncated: set[int] = set()
        self.horizon = 1  # oldest dxid any live snapshot may see as running

    TRUNCATED = object()

    def record(self, local_xid: int, dxid: int) -> None:
        self.entries[local_xid] = dxid

    def lookup(self, local_xid: int):
        """Return the dxid, XidMapping.TRUNCATED, or raise IntegrityError."""
        if local_xid in self.entries:
            return self.entries[local_xid]
        if local_xid in self.truncated:
            return XidMapping.TRUNCATED
        raise IntegrityError(
            f"segment {self.segment}: local xid {local_xid} unmapped above horizon"
        )

    def truncate(self, horizon: int) -> int:
        """Drop entries whose dxid is below `horizon`; idempotent."""
        for local_xid in sorted(self.entries):
            if self.entries[local_xid] < horizon:
                self.truncated.add(local_xid)
                del self.entries[local_xid]
        self.horizon = max(self.horizon, horizon)
        return self.horizon


class DistributedTxnManager:
    """Coordinator-side dxid allocation, snapshot creation and commit planning."""

    def __init__(self):
        self.next_dxid = 1
        self.transactions: dict[int, TransactionDescriptor] = {}
        self.max_committed = 0
        self.committed: set[int] = set()
        self.aborted: set[int] = set()

    def begin(self, tick: int) -> TransactionDescriptor:
        dxid = self.next_dxid
        self.next_dxid += 1
        in_progress = frozenset(
            d for d, t in self.transactions.items() if not t.is_finished()
        ) | {dxid}
        snap = DistributedSnapshot(in_progress, self.max_committed)
        txn = TransactionDescriptor(dxid=dxid, begin_tick=tick, snapshot=snap)
        self.transactions[dxid] = txn
        return txn

    def current_snapshot(self) -> DistributedSnapshot:
        """Snapshot as a fresh observer would see the cluster right now."""
        in_progress = frozenset(
            d for d, t in self.transactions.items() if not t.is_finished()
        )
        return DistributedSnapshot(in_progress, self.max_committed)

    def plan_commit(self, txn: TransactionDescriptor, force_2pc: bool = False) -> Protocol:
        """Pick the commit protocol from the observed write-set."""
        k = len(txn.write_segments)
        if k == 0:
            return Protocol.READ_ONLY
        if k == 1 and not force_2pc:
            return Protocol.ONE_PHASE
        return Protocol.TWO_PHASE

    def mark_committed(self, dxid: int) -> None:
        txn = self.transactions[dxid]
        txn.state = TxnState.COMMITTED
        self.committed.add(dxid)
        self.max_committed = max(self.max_committed, dxid)

    def mark_aborted(self, dxid: int) -> None:
        txn = self.transactions[dxid]
        txn.state = TxnState.ABORTED
        self.aborted.add(dxid)

    def is_committed(self, dxid: int) -> bool:
        return dxid in self.committed

    def is_live(self, dxid: int) -> bool:
        txn = self.transactions.get(dxid)
        return txn is not None and not txn.is_finished()

    def live_snapshots(self) -> list[DistributedSnapshot]:
        return [
            t.snapshot for _, t in sorted(self.transactions.items())
            if not t.is_finished()
        ]

    def truncation_horizon(self) -> int:
        """Oldest dxid visible as running to any live snapshot."""
        horizon = self.next_dxid
        for snap in self.live_snapshots():
            if snap.in_progress:
                horizon = min(horizon, min(snap.in_progress))
        return horizon

    def truncate_mapping(self, mapping: XidMapping) -> int:
        return mapping.truncate(self.truncation_horizon())


def expected_accounting(protocol: Protocol, k: int) -> tuple[Counter, Counter]:
    """Closed-form message/fsync counts for a commit over k write segments."""
    if protocol is Protocol.READ_ONLY:
        return Counter(), Counter()
    if protocol is Protocol.ONE_PHASE:
        return (
            Counter({MSG_COMMIT: 1, MSG_COMMIT_OK: 1}),
            Counter({FSYNC_SEGMENT_COMMIT: 1}),
        )
    return (
        Counter(
            {MSG_PREPARE: k, MSG_PREPARE_OK: k, MSG_COMMIT: k, MSG_COMMIT_OK: k}
        ),
        Counter(
            {
                FSYNC_SEGMENT_PREPARE: k,
                FSYNC_COORD_COMMIT: 1,
                FSYNC_SEGMENT_COMMIT: k,
            }
        ),
    )


def visible(
    version,
    snapshot: DistributedSnapshot,
    mapping: XidMapping,
    txn,
    *,
    local_committed,
    dxid_committed,
) -> bool:
    """Decide tuple visibility for `txn` under `snapshot` on one segment.

    `version` carries xmin_local/cmin and optional xmax_local/cmax (0 = unset).
    `txn` provides the reader's local xid on this segment (may be None) and
    its current command_id.  `local_committed(local_xid)` and
    `dxid_committed(dxid)` answer commit state on the segment and cluster-wide.
    """
    my_local = txn.local_xid(mapping.segment) if txn is not None else None
    cid = txn.command_id if txn is not None else 0

    def writer_visible(local_xid: int, command: int) -> bool:
        if my_local is not None and local_xid == my_local:
            return command < cid  # own write from an earlier statement
        d = mapping.lookup(local_xid)
        if d is XidMapping.TRUNCATED:
            # below every live snapshot's horizon: local state alone decides
            return local_committed(local_xid)
        return snapshot.dxid_visible(d, dxid_committed(d))

    if not writer_visible(version.xmin_local, version.cmin):
        return False
    if version.xmax_local == 0:
        return True
    return not writer_visible(version.xmax_local, version.cmax)

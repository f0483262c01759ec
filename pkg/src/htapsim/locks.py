"""Per-segment object lock service: 8 lock modes, conflict matrix, FIFO grant queues.

Each segment (the coordinator counts as segment -1) runs one LockTable.
Wait-for edges are derived from the tables by the wait-graph module, so the
lock table records, for every waiting request, which holders block it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum


class ProtocolError(Exception):
    """Raised when a lock operation violates its protocol preconditions."""


class LockMode(IntEnum):
    ACCESS_SHARE = 1
    ROW_SHARE = 2
    ROW_EXCLUSIVE = 3
    SHARE_UPDATE_EXCLUSIVE = 4
    SHARE = 5
    SHARE_ROW_EXCLUSIVE = 6
    EXCLUSIVE = 7
    ACCESS_EXCLUSIVE = 8


# Conflict sets by lock level.  Symmetric by construction: level a conflicts
# with level b iff b is listed under a (and then a is listed under b).
_CONFLICT_LEVELS = {
    1: frozenset({8}),
    2: frozenset({7, 8}),
    3: frozenset({5, 6, 7, 8}),
    4: frozenset({4, 5, 6, 7, 8}),
    5: frozenset({3, 4, 6, 7, 8}),
    6: frozenset({3, 4, 5, 6, 7, 8}),
    7: frozenset({2, 3, 4, 5, 6, 7, 8}),
    8: frozenset({1, 2, 3, 4, 5, 6, 7, 8}),
}


def conflicts(a: LockMode | int, b: LockMode | int) -> bool:
    """True iff modes a and b cannot be granted concurrently to different txns."""
    a, b = int(a), int(b)
    if not (1 <= a <= 8 and 1 <= b <= 8):
        raise ValueError(f"lock levels must be in 1..8, got {a}, {b}")
    return b in _CONFLICT_LEVELS[a]


class TagKind(Enum):
    RELATION = "relation"
    TUPLE = "tuple"
    TRANSACTION = "transaction"


@dataclass(frozen=True)
class LockTag:
    """Identity of a lockable object on one segment.

    `obj` is a relation name, a tuple address (table, slot), or a local xid.
    """

    kind: TagKind
    segment: int
    obj: object

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.obj}@seg{self.segment}"


class RequestStatus(Enum):
    GRANTED = "granted"
    WAITING = "waiting"


@dataclass
class LockRequest:
    txn: int  # distributed xid
    tag: LockTag
    mode: LockMode
    status: RequestStatus
    enqueue_tick: int

    def sort_key(self) -> tuple[int, int]:
        # FIFO among waiters: enqueue tick first, dxid breaks ties.
        return (self.enqueue_tick, self.txn)


class AcquireResult(Enum):
    GRANTED = "granted"
    BLOCKED = "blocked"


@dataclass
class LockTable:
    """Serialized lock state machine for a single segment.

    Grant discipline is strict FIFO among conflicting waiters; a waiter
    compatible with the granted set is still not granted past an earlier
    conflicting waiter (no lock jumping).
    """

    segment: int
    _queues: dict[LockTag, list[LockRequest]] = field(default_factory=dict)
    _active: set[int] = field(default_factory=set)

    # -- transaction registration -------------------------------------------

    def register_txn(self, txn: int) -> None:
        self._active.add(txn)

    def is_registered(self, txn: int) -> bool:
        return txn in self._active

    # -- core operations -----------------------------------------------------

    def acquire(
        self, txn: int, tag: LockTag, mode: LockMode, tick: int
    ) -> tuple[AcquireResult, list[LockRequest]]:
        """Request `tag` in `mode` for `txn`.

        Returns (GRANTED, []) or (BLOCKED, blockers) where blockers are the
        requests (granted holders plus the first earlier conflicting waiter)
        this request now waits behind.
        """
        if txn not in self._active:
            raise ProtocolError(f"txn {txn} not active on segment {self.segment}")
        if tag.segment != self.segment:
            raise ProtocolError(f"tag {tag} does not belong to segment {self.segment}")
        queue = self._queues.setdefault(tag, [])
        for req in queue:
            if req.txn == txn and req.mode == mode:
                if req.status is RequestStatus.GRANTED:
                    return AcquireResult.GRANTED, []  # idempotent re-grant
                raise ProtocolError(
                    f"txn {txn} already waiting for {tag} mode {mode.name}"
                )
        blockers = self._blockers_for(queue, txn, mode)
        req = LockRequest(txn, tag, mode, RequestStatus.GRANTED, tick)
        if blockers:
            req.status = RequestStatus.WAITING
        queue.append(req)
        if blockers:
            return AcquireResult.BLOCKED, blockers
        return AcquireResult.GRANTED, []

    def release_all(self, txn: int, tick: int) -> list[LockRequest]:
        """Drop every grant and wait of `txn` on this segment (commit/abort path).

        Returns the requests promoted to granted by queue re-evaluation.
        Idempotent: releasing a txn that holds nothing returns [].
        """
        promoted: list[LockRequest] = []
        for tag in list(self._queues):
            queue = self._queues[tag]
            remaining = [r for r in queue if r.txn != txn]
            if len(remaining) != len(queue):
                self._queues[tag] = remaining
                promoted.extend(self._reevaluate(tag))
            if not self._queues[tag]:
                del self._queues[tag]
        self._active.discard(txn)
        return promoted

    def release_tuple_lock(self, txn: int, tag: LockTag) -> list[LockRequest]:
        """Release one tuple-lock grant mid-transaction (the dotted-edge case)."""
        if tag.kind is not TagKind.TUPLE:
            raise ProtocolError(f"{tag} is not a tuple lock")
        queue = self._queues.get(tag, [])
        held = [
            r for r in queue if r.txn == txn and r.status is RequestStatus.GRANTED
        ]
        if not held:
            raise ProtocolError(f"txn {txn} does not hold tuple lock {tag}")
        self._queues[tag] = [r for r in queue if r not in held]
        promoted = self._reevaluate(tag)
        if not self._queues[tag]:
            del self._queues[tag]
        return promoted

    # -- queries used by the wait-graph and the simulator ---------------------

    def waiting_requests(self) -> list[LockRequest]:
        out = []
        for tag in self._queues:
            out.extend(
                r for r in self._queues[tag] if r.status is RequestStatus.WAITING
            )
        return out

    def blockers_of(self, req: LockRequest) -> list[LockRequest]:
        """Requests a waiter currently waits behind: every conflicting granted
        holder plus the first earlier conflicting waiter (the one that will be
        granted before it)."""
        queue = self._queues.get(req.tag, [])
        return self._blockers_for(queue, req.txn, req.mode, before=req)

    def holders(self, tag: LockTag) -> list[LockRequest]:
        return [
            r
            for r in self._queues.get(tag, [])
            if r.status is RequestStatus.GRANTED
        ]

    def holds(self, txn: int, tag: LockTag, mode: LockMode | None = None) -> bool:
        for r in self._queues.get(tag, []):
            if r.txn == txn and r.status is RequestStatus.GRANTED:
                if mode is None or r.mode == mode:
                    return True
        return False

    def locks_of(self, txn: int) -> list[LockRequest]:
        out = []
        for tag in self._queues:
            out.extend(r for r in self._queues[tag] if r.txn == txn)
        return out

    def check_invariants(self) -> None:
        """No two granted requests on one tag may conflict (distinct txns), and
        every waiter must have at least one blocker."""
        for tag, queue in self._queues.items():
            granted = [r for r in queue if r.status is RequestStatus.GRANTED]
            for i, a in enumerate(granted):
                for b in granted[i + 1 :]:
                    if a.txn != b.txn and conflicts(a.mode, b.mode):
                        raise AssertionError(
                            f"conflicting grants on {tag}: {a} vs {b}"
                        )
            for r in queue:
                if r.status is RequestStatus.WAITING and not self.blockers_of(r):
                    raise AssertionError(f"waiter without blocker on {tag}: {r}")

    # -- internals ------------------------------------------------------------

    def _blockers_for(
        self,
        queue: list[LockRequest],
        txn: int,
        mode: LockMode,
        before: LockRequest | None = None,
    ) -> list[LockRequest]:
        blockers = [
            r
            for r in queue
            if r.status is RequestStatus.GRANTED
            and r.txn != txn
            and conflicts(r.mode, mode)
        ]
        waiting = sorted(
            (r for r in queue if r.status is RequestStatus.WAITING and r.txn != txn),
            key=LockRequest.sort_key,
        )
        if before is not None:
            waiting = [r for r in waiting if r.sort_key() < before.sort_key()]
        for r in waiting:
            if conflicts(r.mode, mode):
                blockers.append(r)  # only the first conflicting earlier waiter
                break
        return blockers

    def _reevaluate(self, tag: LockTag) -> list[LockRequest]:
        """Promote waiters FIFO until the first one still in conflict."""
        queue = self._queues.get(tag, [])
        granted = [r for r in queue if r.status is RequestStatus.GRANTED]
        waiting = sorted(
            (r for r in queue if r.status is RequestStatus.WAITING),
            key=LockRequest.sort_key,
        )
        promoted = []
        for req in waiting:
            blocked = any(
                g.txn != req.txn and conflicts(g.mode, req.mode) for g in granted
            )
            if blocked:
                break
            req.status = RequestStatus.GRANTED
            granted.append(req)
            promoted.append(req)
        return promoted

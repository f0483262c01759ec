"""Scenario files: tables, resource groups, numbered session steps, expectations.

YAML documents with a micro-grammar for the statements:

    begin | commit | abort | lock <table> | detect
    insert <table> values (a, b)[, (c, d)...]
    update <table> set c2=<int> [where <conjunction>]
    select <table> [where <conjunction>]

where a conjunction is column equalities joined by `and` (columns c1/c2 only).
Steps carry a global sequence number; the simulator issues them in that order,
treating a step that blocks as issued.  `detect` forces one detector run and
belongs to no session's transaction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import yaml

from .resgroup import ResourceGroupConfig
from .store import Predicate, TableDef


class ScenarioError(Exception):
    """Malformed scenario; message carries the offending line when known."""


@dataclass
class Step:
    seq: int
    session: str
    kind: str
    raw: str
    table: str | None = None
    pred: Predicate | None = None
    set_c2: int | None = None
    rows: list[tuple[int, int]] | None = None
    mem: float | None = None
    cpu: int | None = None


@dataclass
class TableSpec:
    table: TableDef
    rows: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class SessionDef:
    sid: str
    group: str | None = None


@dataclass
class Expectation:
    verdict: str | None = None  # "deadlock" | "clean"
    victims: list[str] = field(default_factory=list)
    outcomes: dict[str, str] = field(default_factory=dict)


@dataclass
class Scenario:
    tables: list[TableSpec] = field(default_factory=list)
    groups: list[ResourceGroupConfig] = field(default_factory=list)
    sessions: list[SessionDef] = field(default_factory=list)
    steps: list[Step] = field(default_factory=list)
    expect: Expectation | None = None


_SQL_PATTERNS = {
    "begin": re.compile(r"^begin$"),
    "commit": re.compile(r"^commit$"),
    "abort": re.compile(r"^abort$"),
    "detect": re.compile(r"^detect$"),
    "lock": re.compile(r"^lock\s+(\w+)$"),
    "insert": re.compile(r"^insert\s+(\w+)\s+values\s+(.+)$"),
    "update": re.compile(r"^update\s+(\w+)\s+set\s+(\w+)\s*=\s*(-?\d+)(?:\s+where\s+(.+))?$"),
    "select": re.compile(r"^select\s+(\w+)(?:\s+where\s+(.+))?$"),
}

_COND = re.compile(r"^(c1|c2)\s*=\s*(-?\d+)$")
_VALUES = re.compile(r"\(\s*(-?\d+)\s*,\s*(-?\d+)\s*\)")


def parse_predicate(text: str | None, line: int = 0) -> Predicate:
    if text is None or not text.strip():
        return Predicate()
    eqs: dict[str, int] = {}
    for part in re.split(r"\s+and\s+", text.strip()):
        m = _COND.match(part.strip())
        if not m:
            raise ScenarioError(f"line {line}: bad condition {part.strip()!r}")
        eqs[m.group(1)] = int(m.group(2))
    return Predicate(eqs)


def parse_sql(sql: str, seq: int, session: str, line: int = 0) -> Step:
    text = " ".join(sql.strip().split())
    for kind, pat in _SQL_PATTERNS.items():
        m = pat.match(text)
        if not m:
            continue
        step = Step(seq=seq, session=session, kind=kind, raw=text)
        if kind == "lock":
            step.table = m.group(1)
        elif kind == "insert":
            step.table = m.group(1)
            rows = [(int(a), int(b)) for a, b in _VALUES.findall(m.group(2))]
            if not rows:
                raise ScenarioError(f"line {line}: insert without value tuples")
            step.rows = rows
        elif kind == "update":
            step.table = m.group(1)
            if m.group(2) != "c2":
                raise ScenarioError(
                    f"line {line}: updating the distribution key is not supported"
                )
            step.set_c2 = int(m.group(3))
            step.pred = parse_predicate(m.group(4), line)
        elif kind == "select":
            step.table = m.group(1)
            step.pred = parse_predicate(m.group(2), line)
        return step
    raise ScenarioError(f"line {line}: cannot parse statement {text!r}")


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that stamps every mapping with its source line."""


def _mapping_with_line(loader, node, deep=False):
    mapping = yaml.SafeLoader.construct_mapping(loader, node, deep=deep)
    mapping["__line__"] = node.start_mark.line + 1
    return mapping


_LineLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _mapping_with_line
)


def _line(rec: dict) -> int:
    return rec.get("__line__", 0)


def parse_cpuset(text) -> frozenset[int]:
    """Parse cpuset syntax like "0-3" or "0-3,8,10-11"."""
    cores: set[int] = set()
    for chunk in str(text).split(","):
        chunk = chunk.strip()
        if "-" in chunk:
            lo, hi = chunk.split("-", 1)
            cores.update(range(int(lo), int(hi) + 1))
        elif chunk:
            cores.add(int(chunk))
    return frozenset(cores)


def _parse_group(rec: dict) -> ResourceGroupConfig:
    line = _line(rec)
    known = {
        "name", "CONCURRENCY", "MEMORY_LIMIT", "MEMORY_SHARED_QUOTA",
        "CPU_RATE_LIMIT", "CPUSET", "__line__",
    }
    for key in rec:
        if key not in known:
            raise ScenarioError(f"line {line}: unknown group parameter {key!r}")
    try:
        cpuset = rec.get("CPUSET")
        return ResourceGroupConfig(
            name=rec["name"],
            concurrency=int(rec["CONCURRENCY"]),
            memory_limit=float(rec["MEMORY_LIMIT"]),
            memory_shared_quota=float(rec.get("MEMORY_SHARED_QUOTA", 20)),
            cpu_rate_limit=(
                int(rec["CPU_RATE_LIMIT"]) if "CPU_RATE_LIMIT" in rec else None
            ),
            cpuset=parse_cpuset(cpuset) if cpuset is not None else None,
        )
    except KeyError as exc:
        raise ScenarioError(f"line {line}: group missing parameter {exc}") from None


def parse_scenario(text: str) -> Scenario:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else 0
        raise ScenarioError(f"line {line}: invalid YAML: {exc}") from None
    if doc is None:
        return Scenario()
    if not isinstance(doc, dict):
        raise ScenarioError("line 1: scenario must be a mapping")

    scenario = Scenario()
    for rec in doc.get("tables", []) or []:
        line = _line(rec)
        try:
            table = TableDef(
                name=rec["name"],
                dist_key=rec.get("distributed_by", "c1"),
            )
        except KeyError as exc:
            raise ScenarioError(f"line {line}: table missing {exc}") from None
        rows = [tuple(int(v) for v in row) for row in rec.get("rows", []) or []]
        for row in rows:
            if len(row) != 2:
                raise ScenarioError(f"line {line}: rows must be (c1, c2) pairs")
        scenario.tables.append(TableSpec(table, rows))

    for rec in doc.get("groups", []) or []:
        scenario.groups.append(_parse_group(rec))

    seen_seq: dict[int, int] = {}
    for rec in doc.get("sessions", []) or []:
        line = _line(rec)
        sid = str(rec.get("id", ""))
        if not sid:
            raise ScenarioError(f"line {line}: session without id")
        if any(s.sid == sid for s in scenario.sessions):
            raise ScenarioError(f"line {line}: duplicate session id {sid!r}")
        scenario.sessions.append(SessionDef(sid, rec.get("group")))
        for step_rec in rec.get("steps", []) or []:
            sline = _line(step_rec)
            if "seq" not in step_rec or "sql" not in step_rec:
                raise ScenarioError(f"line {sline}: step needs seq and sql")
            seq = int(step_rec["seq"])
            if seq in seen_seq:
                raise ScenarioError(
                    f"line {sline}: duplicate seq {seq} (first at line {seen_seq[seq]})"
                )
            seen_seq[seq] = sline
            step = parse_sql(str(step_rec["sql"]), seq, sid, sline)
            if "mem" in step_rec:
                step.mem = float(step_rec["mem"])
            if "cpu" in step_rec:
                step.cpu = int(step_rec["cpu"])
            scenario.steps.append(step)

    if "expect" in doc and doc["expect"]:
        rec = doc["expect"]
        scenario.expect = Expectation(
            verdict=rec.get("verdict"),
            victims=[str(v) for v in rec.get("victims", []) or []],
            outcomes={str(k): str(v) for k, v in (rec.get("outcomes") or {}).items()
                      if k != "__line__"},
        )
        if scenario.expect.verdict not in (None, "clean", "deadlock"):
            raise ScenarioError(
                f"line {_line(rec)}: verdict must be clean or deadlock"
            )

    scenario.steps.sort(key=lambda s: s.seq)
    sids = {s.sid for s in scenario.sessions}
    for step in scenario.steps:
        if step.session not in sids:
            raise ScenarioError(f"step {step.seq}: unknown session {step.session!r}")
    return scenario


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())

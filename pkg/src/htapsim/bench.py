"""Workload generators and the benchmark driver.

Closed-loop clients replay synthesized transactions on the simulated cluster
until the tick budget runs out; results report TPS, latency percentiles in
ticks, protocol mix, and message/fsync counts.  Absolute numbers are
tick-denominated and only meaningful as ratios between configurations.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .dtm import Protocol
from .scenario import Step, parse_sql
from .sim import Cluster, SimConfig
from .store import TableDef

WORKLOADS = ("update-only", "insert-only", "tpcb-like", "mixed-htap")


@dataclass
class BenchResult:
    workload: str
    clients: int
    ticks: int
    committed: int = 0
    aborted: int = 0
    tps: float = 0.0
    p50_latency: float = 0.0
    p95_latency: float = 0.0
    max_inflight_updates: int = 0
    protocol_counts: dict[str, int] = field(default_factory=dict)
    group_latency_p50: dict[str, float] = field(default_factory=dict)
    metrics_csv: str = ""
    trace: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"workload={self.workload} clients={self.clients} ticks={self.ticks}",
            f"committed={self.committed} aborted={self.aborted} tps={self.tps:.4f}",
            f"latency_ticks p50={self.p50_latency:.1f} p95={self.p95_latency:.1f}",
            f"max_inflight_updates={self.max_inflight_updates}",
            f"protocols={dict(sorted(self.protocol_counts.items()))}",
        ]
        for group in sorted(self.group_latency_p50):
            lines.append(
                f"group={group} p50_latency={self.group_latency_p50[group]:.1f}"
            )
        return "\n".join(lines)


def default_htap_groups() -> list:
    """Equal-share split between the analytical and transactional groups."""
    from .resgroup import ResourceGroupConfig

    return [
        ResourceGroupConfig("olap_group", 10, 15, 20, cpu_rate_limit=20),
        ResourceGroupConfig("oltp_group", 50, 15, 20, cpu_rate_limit=20),
    ]


def percentile(values: list, q: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    idx = min(len(ordered) - 1, int(round(q * (len(ordered) - 1))))
    return float(ordered[idx])


def _steps(sid: str, texts: list[str], cpu: dict[int, int] | None = None):
    for i, text in enumerate(texts):
        step = parse_sql(text, seq=0, session=sid)
        if cpu and i in cpu:
            step.cpu = cpu[i]
        yield step


def update_only_client(sid: str, idx: int, clients: int, rng: random.Random, keys: int):
    """Single-row updates to keys private to this client (no row conflicts)."""
    own = [k for k in range(keys) if k % clients == idx] or [idx]
    while True:
        key = rng.choice(own)
        yield from _steps(
            sid, ["begin", f"update accounts set c2={rng.randrange(1000)} where c1={key}", "commit"]
        )


def insert_only_client(sid: str, idx: int, rng: random.Random, n_segments: int):
    """Per-transaction inserts that all route to one segment (1PC candidates)."""
    n = 0
    while True:
        key = idx * n_segments + (n % n_segments)  # constant within the txn
        values = ",".join(f"({key},{n + j})" for j in range(3))
        yield from _steps(sid, ["begin", f"insert history values {values}", "commit"])
        n += 1


def tpcb_like_client(sid: str, idx: int, clients: int, rng: random.Random, scale):
    """Account/teller/branch updates plus a history insert per transaction."""
    accounts, tellers, branches = scale
    while True:
        a = rng.randrange(accounts)
        t = idx % tellers
        b = idx % branches
        delta = rng.randrange(100)
        yield from _steps(
            sid,
            [
                "begin",
                f"update accounts set c2={delta} where c1={a}",
                f"update tellers set c2={delta} where c1={t}",
                f"update branches set c2={delta} where c1={b}",
                f"insert history values ({a},{delta})",
                "commit",
            ],
        )


def olap_client(sid: str, rng: random.Random, scan_cpu: int):
    while True:
        yield from _steps(sid, ["begin", "select bigtable", "commit"], cpu={1: scan_cpu})


def oltp_client(sid: str, idx: int, clients: int, rng: random.Random, keys: int):
    own = [k for k in range(keys) if k % clients == idx] or [idx]
    while True:
        key = rng.choice(own)
        yield from _steps(
            sid,
            ["begin", f"update accounts set c2={rng.randrange(100)} where c1={key}", "commit"],
            cpu={1: 1},
        )


def bench(
    workload: str,
    clients: int,
    duration_ticks: int,
    config: SimConfig | None = None,
    seed: int = 0,
) -> BenchResult:
    if workload not in WORKLOADS:
        raise ValueError(f"unknown workload {workload!r}; pick one of {WORKLOADS}")
    if clients < 1:
        raise ValueError("need at least one client")
    config = config or SimConfig()
    config.eager = True
    config.seed = seed
    if workload == "mixed-htap" and not config.resource_groups:
        config.resource_groups = default_htap_groups()
    cluster = Cluster(config)
    rng = random.Random(seed)

    if workload == "update-only":
        keys = max(64, clients * 8)
        cluster.create_table(
            TableDef("accounts"), [(k, 0) for k in range(keys)]
        )
        for i in range(clients):
            sid = f"c{i:03d}"
            cluster.add_session(
                sid, step_iter=update_only_client(sid, i, clients, random.Random(seed + i), keys)
            )
    elif workload == "insert-only":
        cluster.create_table(TableDef("history"))
        for i in range(clients):
            sid = f"c{i:03d}"
            cluster.add_session(
                sid,
                step_iter=insert_only_client(sid, i, random.Random(seed + i), config.n_segments),
            )
    elif workload == "tpcb-like":
        scale = (100 * max(1, clients // 4 + 1), 10, max(1, clients // 8 + 1))
        accounts, tellers, branches = scale
        cluster.create_table(TableDef("accounts"), [(k, 0) for k in range(accounts)])
        cluster.create_table(TableDef("tellers"), [(k, 0) for k in range(tellers)])
        cluster.create_table(TableDef("branches"), [(k, 0) for k in range(branches)])
        cluster.create_table(TableDef("history"))
        for i in range(clients):
            sid = f"c{i:03d}"
            cluster.add_session(
                sid, step_iter=tpcb_like_client(sid, i, clients, random.Random(seed + i), scale)
            )
    else:  # mixed-htap: OLAP scans and OLTP point updates in separate groups
        if cluster.resources is None:
            raise ValueError("mixed-htap needs resource groups in the config")
        group_names = sorted(cluster.resources.configs)
        olap_group = next((g for g in group_names if "olap" in g), group_names[0])
        oltp_group = next((g for g in group_names if "oltp" in g), group_names[-1])
        keys = max(64, clients * 4)
        cluster.create_table(TableDef("accounts"), [(k, 0) for k in range(keys)])
        cluster.create_table(TableDef("bigtable"), [(k, k) for k in range(30)])
        olap_clients = max(1, clients // 2)
        oltp_clients = max(1, clients - olap_clients)
        for i in range(olap_clients):
            sid = f"olap{i:03d}"
            cluster.add_session(
                sid, group=olap_group, step_iter=olap_client(sid, random.Random(seed + i), 40)
            )
        for i in range(oltp_clients):
            sid = f"oltp{i:03d}"
            cluster.add_session(
                sid,
                group=oltp_group,
                step_iter=oltp_client(sid, i, oltp_clients, random.Random(seed + 1000 + i), keys),
            )

    cluster.run(until_tick=duration_ticks)

    latencies = []
    group_lat: dict[str, list] = {}
    for sid in sorted(cluster.sessions):
        session = cluster.sessions[sid]
        commits = [
            lat
            for lat, outcome in zip(session.txn_latencies, session.outcomes)
            if outcome == "committed"
        ]
        latencies.extend(commits)
        if session.group:
            group_lat.setdefault(session.group, []).extend(commits)
    protocol_counts: dict[str, int] = {}
    for dxid in sorted(cluster.accounting):
        acc = cluster.accounting[dxid]
        if acc.protocol is not None and cluster.dtm.is_committed(dxid):
            name = acc.protocol.value
            protocol_counts[name] = protocol_counts.get(name, 0) + 1
    return BenchResult(
        workload=workload,
        clients=clients,
        ticks=duration_ticks,
        committed=cluster.committed_txns,
        aborted=cluster.aborted_txns,
        tps=cluster.committed_txns / duration_ticks if duration_ticks else 0.0,
        p50_latency=percentile(latencies, 0.5),
        p95_latency=percentile(latencies, 0.95),
        max_inflight_updates=cluster.max_inflight_updates,
        protocol_counts=protocol_counts,
        group_latency_p50={g: percentile(v, 0.5) for g, v in sorted(group_lat.items())},
        metrics_csv=cluster.metrics_csv(),
        trace=cluster.trace,
    )

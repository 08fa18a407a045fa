"""Latency quantiles, breach rates, availability/drop/utilization metrics,
pipeline-attributed cost ledger, break-even analysis, and run comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .domain import ModelSpec

# Dedicated idle time is charged to this reserved pipeline id so idle cost is
# visible in reports instead of being amortized away.
UNATTRIBUTED_IDLE = "unattributed-idle"

DEDICATED_WALL_CLOCK = "DedicatedWallClock"
SERVERLESS_BUSY = "ServerlessBusy"
PROXY_ALWAYS_ON = "ProxyAlwaysOn"


class MetricsError(Exception):
    pass


class EmptySamples(MetricsError):
    pass


class NoIntervals(MetricsError):
    pass


class NoRequests(MetricsError):
    pass


class NonPositiveRate(MetricsError):
    pass


class PipelineMismatch(MetricsError):
    pass


def quantile(samples: Iterable[float], q: float) -> float:
    """Nearest-rank quantile: value at 1-based index ceil(q * n) of the sorted samples."""
    data = sorted(samples)
    if not data:
        raise EmptySamples("quantile of no samples")
    if not 0.0 < q <= 1.0:
        raise MetricsError(f"q must be in (0, 1], got {q}")
    rank = math.ceil(q * len(data))
    return data[rank - 1]


class LatencyRecorder:
    """Exact per-key latency samples with completion timestamps.

    Desk-scale runs keep every sample, which makes quantiles exact and reports
    deterministic.
    """

    def __init__(self):
        self._samples: dict[str, list[tuple[int, int]]] = {}

    def record(self, key: str, completed_ms: int, latency_ms: int):
        self._samples.setdefault(key, []).append((completed_ms, latency_ms))

    def keys(self):
        return sorted(self._samples)

    def values(self, key: str) -> list[int]:
        return [v for _, v in self._samples.get(key, [])]

    def timed(self, key: str) -> list[tuple[int, int]]:
        return list(self._samples.get(key, []))

    def quantile(self, key: str, q: float) -> float:
        return quantile(self.values(key), q)

    def window_values(self, key: str, start_ms: int, end_ms: int) -> list[int]:
        return [v for t, v in self._samples.get(key, []) if start_ms <= t < end_ms]


@dataclass(frozen=True)
class IntervalStat:
    start_ms: int
    end_ms: int
    count: int
    p95_ms: float
    breached: bool


def interval_stats(
    timed_samples: list[tuple[int, int]],
    horizon_ms: int,
    interval_ms: int,
    steady_p95: float,
    multiplier: float,
) -> list[IntervalStat]:
    """Per-interval P95s with breach flags; empty intervals are omitted."""
    buckets: dict[int, list[int]] = {}
    for completed_ms, latency_ms in timed_samples:
        if 0 <= completed_ms < horizon_ms:
            buckets.setdefault(completed_ms // interval_ms, []).append(latency_ms)
    out = []
    for idx in sorted(buckets):
        values = buckets[idx]
        p95 = quantile(values, 0.95)
        out.append(
            IntervalStat(
                idx * interval_ms,
                (idx + 1) * interval_ms,
                len(values),
                p95,
                p95 > multiplier * steady_p95,
            )
        )
    return out


def breach_rate(intervals: list[IntervalStat]) -> float:
    """Fraction of non-empty intervals whose P95 exceeds the breach threshold."""
    if not intervals:
        raise NoIntervals("no non-empty intervals")
    return sum(1 for s in intervals if s.breached) / len(intervals)


@dataclass(frozen=True)
class CostLedgerEntry:
    span_ms: tuple[int, int]
    model_id: str
    mode: str
    kind: str
    amount: float
    pipeline_id: str


@dataclass
class CostLedger:
    entries: list[CostLedgerEntry] = field(default_factory=list)

    def total(self) -> float:
        return math.fsum(e.amount for e in self.entries)

    def by_pipeline(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.pipeline_id] = out.get(e.pipeline_id, 0.0) + e.amount
        return {k: out[k] for k in sorted(out)}

    def by_model(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.model_id] = out.get(e.model_id, 0.0) + e.amount
        return {k: out[k] for k in sorted(out)}

    def by_kind(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.entries:
            out[e.kind] = out.get(e.kind, 0.0) + e.amount
        return {k: out[k] for k in sorted(out)}


def accrue_costs(pools, pipelines, span_ms: int) -> CostLedger:
    """Build the pipeline-attributed cost ledger from pool busy-time accounting.

    Dedicated: dedicated_count x hourly rate x wall-clock span, split across
    pipelines by their busy slot-time share of total capacity; the remainder is
    charged to the reserved unattributed-idle pipeline. Serverless: busy
    slot-time per invoking pipeline at the per-busy-second rate (provisioning
    time is unbilled). Proxy preprocessing: always-on hourly cost per pipeline.
    """
    ledger = CostLedger()
    for key in sorted(pools):
        pool = pools[key]
        spec = pool.spec
        if pool.backend == "dedicated":
            if spec.dedicated_count == 0 or spec.cost_dedicated_per_hour == 0:
                continue
            total = spec.dedicated_count * spec.cost_dedicated_per_hour * span_ms / 3_600_000.0
            capacity_slot_ms = spec.dedicated_count * spec.per_instance_concurrency * span_ms
            attributed = 0.0
            for pipeline_id in sorted(pool.busy_ms_by_pipeline):
                busy = pool.busy_ms_by_pipeline[pipeline_id]
                share = total * busy / capacity_slot_ms
                attributed += share
                ledger.entries.append(
                    CostLedgerEntry(
                        (0, span_ms), spec.model_id, "dedicated", DEDICATED_WALL_CLOCK, share, pipeline_id
                    )
                )
            ledger.entries.append(
                CostLedgerEntry(
                    (0, span_ms),
                    spec.model_id,
                    "dedicated",
                    DEDICATED_WALL_CLOCK,
                    total - attributed,
                    UNATTRIBUTED_IDLE,
                )
            )
        else:
            rate = spec.cost_serverless_per_busy_second
            if rate == 0:
                continue
            for pipeline_id in sorted(pool.busy_ms_by_pipeline):
                busy = pool.busy_ms_by_pipeline[pipeline_id]
                ledger.entries.append(
                    CostLedgerEntry(
                        (0, span_ms),
                        spec.model_id,
                        "serverless",
                        SERVERLESS_BUSY,
                        busy * rate / 1000.0,
                        pipeline_id,
                    )
                )
    for pipeline in sorted(pipelines, key=lambda p: p.pipeline_id):
        pre = pipeline.preprocessing
        if pre.kind == "proxy" and pre.always_on_cost_per_hour > 0:
            ledger.entries.append(
                CostLedgerEntry(
                    (0, span_ms),
                    "-",
                    "proxy",
                    PROXY_ALWAYS_ON,
                    pre.always_on_cost_per_hour * span_ms / 3_600_000.0,
                    pipeline.pipeline_id,
                )
            )
    return ledger


def breakeven_utilization(spec: ModelSpec) -> float:
    """Sustained busy fraction above which dedicated capacity beats pay-per-use.

    u* = dedicated hourly rate / (serverless busy-second rate x 3600 x slots).
    Values above 1.0 mean serverless is always cheaper; reports clamp for
    display but the raw ratio is returned.
    """
    if spec.cost_dedicated_per_hour <= 0 or spec.cost_serverless_per_busy_second <= 0:
        raise NonPositiveRate(f"{spec.model_id}: both cost rates must be positive")
    return spec.cost_dedicated_per_hour / (
        spec.cost_serverless_per_busy_second * 3600.0 * spec.per_instance_concurrency
    )


def availability_and_drop(outcomes: Mapping[str, int]) -> tuple[float, float]:
    """(availability, drop rate) from outcome counts.

    Availability counts Success and Degraded over all non-dropped requests;
    drop rate is rejected placements over everything.
    """
    total = sum(outcomes.values())
    if total == 0:
        raise NoRequests("no requests")
    dropped = outcomes.get("dropped", 0)
    served = outcomes.get("success", 0) + outcomes.get("degraded", 0)
    denom = total - dropped
    availability = served / denom if denom else 0.0
    return availability, dropped / total


class MetricsStore:
    """Mutable per-run collector: latency samples, outcome counts, run records,
    fan-out overheads, and the autoscaler's tick log."""

    def __init__(self):
        self.pipeline_latency = LatencyRecorder()
        self.node_latency = LatencyRecorder()
        self.outcomes: dict[str, dict[str, int]] = {}
        self.run_records: list[dict] = []
        self.fanout_overheads: list[int] = []
        self.scaling_log: list[dict] = []
        self.invocations_by_model: dict[str, int] = {}
        self.cold_services_by_model: dict[str, int] = {}

    def note_fanout_overhead(self, overhead_ms: int):
        self.fanout_overheads.append(overhead_ms)

    def note_service(self, model_id: str, service_ms: int, cold: bool):
        self.invocations_by_model[model_id] = self.invocations_by_model.get(model_id, 0) + 1
        if cold:
            self.cold_services_by_model[model_id] = (
                self.cold_services_by_model.get(model_id, 0) + 1
            )

    def note_node_latency(self, model_id: str, completed_ms: int, latency_ms: int):
        self.node_latency.record(model_id, completed_ms, latency_ms)

    def note_scale_tick(self, now: int, model_id: str, rate: float, service_ms: float, target: int, current: int):
        self.scaling_log.append(
            {
                "t": now,
                "model": model_id,
                "rate_per_s": rate,
                "service_ms": service_ms,
                "target": target,
                "current": current,
            }
        )

    def record_run(self, run):
        pid = run.request.pipeline_id
        counts = self.outcomes.setdefault(
            pid, {"success": 0, "degraded": 0, "aborted": 0, "dropped": 0, "incomplete": 0}
        )
        counts[run.outcome] += 1
        latency = run.finished_ms - run.request.arrival_ms
        if run.outcome in ("success", "degraded"):
            self.pipeline_latency.record(pid, run.finished_ms, latency)
        nodes = []
        for nid in sorted(run.node_states):
            s = run.node_states[nid]
            nodes.append(
                {
                    "node_id": nid,
                    "status": s.status,
                    "skip_reason": s.skip_reason,
                    "model_id": s.model_id,
                    "latency_ms": s.latency_ms,
                    "cold": s.cold,
                    "backend_mode": s.backend,
                    "version_id": s.version_id,
                }
            )
        self.run_records.append(
            {
                "request_id": run.request.request_id,
                "pipeline_id": pid,
                "outcome": run.outcome,
                "arrival_ms": run.request.arrival_ms,
                "end_to_end_ms": latency,
                "fanout_overhead_ms": run.fanout_overhead_total_ms,
                "nodes": nodes,
            }
        )

    def outcome_totals(self) -> dict[str, int]:
        totals = {"success": 0, "degraded": 0, "aborted": 0, "dropped": 0, "incomplete": 0}
        for counts in self.outcomes.values():
            for key, value in counts.items():
                totals[key] += value
        return totals


@dataclass(frozen=True)
class ComparisonRow:
    pipeline_id: str
    p95_a_ms: float
    p95_b_ms: float
    p95_reduction_pct: float
    rpm_a: float
    rpm_b: float
    throughput_ratio: float
    cost_a: float
    cost_b: float
    cost_ratio: float
    cost_savings_pct: float


def compare_runs(summary_a: dict, summary_b: dict) -> list[ComparisonRow]:
    """Per-pipeline P95 reduction, throughput ratio, and cost ratio of run B vs run A."""
    pipes_a = summary_a["pipelines"]
    pipes_b = summary_b["pipelines"]
    if set(pipes_a) != set(pipes_b):
        raise PipelineMismatch(
            f"pipelines differ: {sorted(pipes_a)} vs {sorted(pipes_b)}"
        )
    cost_a_by_pipe = summary_a["cost"]["by_pipeline"]
    cost_b_by_pipe = summary_b["cost"]["by_pipeline"]
    rows = []
    for pid in sorted(pipes_a):
        a, b = pipes_a[pid], pipes_b[pid]
        p95_a = a["latency_ms"]["p95"]
        p95_b = b["latency_ms"]["p95"]
        rpm_a = a["completed_rpm"]
        rpm_b = b["completed_rpm"]
        cost_a = cost_a_by_pipe.get(pid, 0.0)
        cost_b = cost_b_by_pipe.get(pid, 0.0)
        rows.append(
            ComparisonRow(
                pipeline_id=pid,
                p95_a_ms=p95_a,
                p95_b_ms=p95_b,
                p95_reduction_pct=(100.0 * (p95_a - p95_b) / p95_a) if p95_a else 0.0,
                rpm_a=rpm_a,
                rpm_b=rpm_b,
                throughput_ratio=(rpm_b / rpm_a) if rpm_a else 0.0,
                cost_a=cost_a,
                cost_b=cost_b,
                cost_ratio=(cost_a / cost_b) if cost_b else 0.0,
                cost_savings_pct=(100.0 * (cost_a - cost_b) / cost_a) if cost_a else 0.0,
            )
        )
    return rows

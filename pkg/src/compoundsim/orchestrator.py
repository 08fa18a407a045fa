"""Pipeline DAG execution per request: parallel frontier dispatch, conditional
node sampling, fan-out overhead, retries, and fallback-driven degradation.

Runs advance only via events on the single-threaded loop; per-run state lives
in its PipelineRun record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .domain import FallbackKind, PipelineSpec, Request
from .router import BreakerOpenError, PendingInvocation

PENDING = "pending"
SKIPPED = "skipped"
IN_FLIGHT = "in_flight"
DONE = "done"
FAILED = "failed"
CANCELLED = "cancelled"

SUCCESS = "success"
DEGRADED = "degraded"
ABORTED = "aborted"
DROPPED = "dropped"
INCOMPLETE = "incomplete"


class SubstituteLoop(Exception):
    """Substitution chains are capped at depth 1."""


@dataclass
class NodeState:
    status: str = PENDING
    skip_reason: str = ""  # "conditional" | "fallback"
    first_dispatch_ms: int = -1
    latency_ms: int = -1
    cold: bool = False
    substituted: bool = False
    model_id: str = ""
    backend: str = ""
    version_id: str = ""


@dataclass
class PipelineRun:
    request: Request
    spec: PipelineSpec
    levels: list[tuple[str, ...]]
    sequential: bool = False
    include: dict[str, bool] = field(default_factory=dict)
    node_states: dict[str, NodeState] = field(default_factory=dict)
    frontier_idx: int = -1
    frontier_pending: set[str] = field(default_factory=set)
    frontier_dispatched: int = 0
    frontier_overhead_ms: int = 0
    seq_cursor: int = 0
    started_ms: int = 0
    finished_ms: int = -1
    outcome: str = ""
    aborted: bool = False
    fanout_overhead_total_ms: int = 0

    @property
    def finished(self) -> bool:
        return self.outcome != ""

    def degraded_nodes(self) -> bool:
        return any(
            (s.status == SKIPPED and s.skip_reason == "fallback") or s.substituted
            for s in self.node_states.values()
        )


@dataclass(frozen=True)
class FanoutOverheadModel:
    """Uniform routing/aggregation overhead applied to frontiers dispatching >= 2 nodes."""

    range_ms: tuple[int, int]

    def sample(self, rng: np.random.Generator, dispatched: int) -> int:
        if dispatched < 2:
            return 0
        lo, hi = self.range_ms
        if hi <= lo:
            return lo
        return int(rng.integers(lo, hi + 1))


class Orchestrator:
    """Drives every in-flight PipelineRun against the router, pools, and breakers."""

    def __init__(
        self,
        *,
        pipelines,
        registry,
        schedule,
        rngs,
        route_fn,
        pools,
        record_breaker,
        on_touch,
        metrics,
        retry_max: int = 2,
        retry_delay_ms: int = 100,
    ):
        self.pipelines = pipelines
        self.registry = registry
        self.schedule = schedule
        self.rngs = rngs
        self.route_fn = route_fn
        self.pools = pools
        self.record_breaker = record_breaker
        self.on_touch = on_touch
        self.metrics = metrics
        self.retry_max = retry_max
        self.retry_delay_ms = retry_delay_ms
        self.runs: dict[str, PipelineRun] = {}
        self.invocations: dict[int, PendingInvocation] = {}
        self._levels_cache: dict[str, list[tuple[str, ...]]] = {}
        self._next_invocation_id = 0

    # -- run lifecycle ----------------------------------------------------

    def levels(self, spec: PipelineSpec) -> list[tuple[str, ...]]:
        cached = self._levels_cache.get(spec.pipeline_id)
        if cached is None:
            from .domain import topological_levels

            cached = topological_levels(spec)
            self._levels_cache[spec.pipeline_id] = cached
        return cached

    def start_run(self, request: Request, now: int, sequential: bool = False) -> PipelineRun:
        spec = self.pipelines[request.pipeline_id]
        levels = self.levels(spec)
        rng = self.rngs.stream("conditional")
        include: dict[str, bool] = {}
        for frontier in levels:
            for nid in frontier:
                prob = spec.node(nid).invocation_prob
                if prob >= 1.0:
                    include[nid] = True
                elif prob <= 0.0:
                    include[nid] = False
                else:
                    include[nid] = bool(rng.random() < prob)
        run = PipelineRun(
            request=request,
            spec=spec,
            levels=levels,
            sequential=sequential,
            include=include,
            node_states={n.node_id: NodeState() for n in spec.nodes},
            started_ms=now,
        )
        self.runs[request.request_id] = run
        start_at = now + spec.preprocessing.added_latency_ms
        if sequential:
            self._dispatch_next_sequential(run, start_at)
        else:
            self._start_frontier(run, 0, start_at)
        return run

    def _start_frontier(self, run: PipelineRun, idx: int, at: int):
        while True:
            if run.finished:
                return
            if idx >= len(run.levels):
                self._finish_run(run, at)
                return
            frontier = run.levels[idx]
            dispatch = []
            for nid in frontier:
                if run.include[nid]:
                    dispatch.append(nid)
                else:
                    state = run.node_states[nid]
                    state.status = SKIPPED
                    state.skip_reason = "conditional"
            run.frontier_idx = idx
            run.frontier_pending = set(dispatch)
            run.frontier_dispatched = len(dispatch)
            if dispatch:
                overhead = FanoutOverheadModel(run.spec.fanout_overhead_range_ms).sample(
                    self.rngs.stream("overhead"), len(dispatch)
                )
                run.frontier_overhead_ms = overhead
                if len(dispatch) >= 2:
                    self.metrics.note_fanout_overhead(overhead)
                    run.fanout_overhead_total_ms += overhead
                for nid in dispatch:
                    self.schedule(
                        engine.DISPATCH_NODE, at, request=run.request.request_id, node=nid, attempt=0
                    )
                return
            idx += 1  # whole frontier conditionally skipped; fall through at the same time

    def _dispatch_next_sequential(self, run: PipelineRun, at: int):
        order = [nid for frontier in run.levels for nid in frontier]
        while run.seq_cursor < len(order):
            nid = order[run.seq_cursor]
            run.seq_cursor += 1
            if run.include[nid]:
                run.frontier_pending = {nid}
                run.frontier_dispatched = 1
                run.frontier_overhead_ms = 0
                self.schedule(
                    engine.DISPATCH_NODE, at, request=run.request.request_id, node=nid, attempt=0
                )
                return
            state = run.node_states[nid]
            state.status = SKIPPED
            state.skip_reason = "conditional"
        self._finish_run(run, at)

    # -- node dispatch ------------------------------------------------------

    def dispatch_node(self, request_id: str, node_id: str, attempt: int, now: int):
        run = self.runs.get(request_id)
        if run is None or run.finished:
            return
        state = run.node_states[node_id]
        if state.status in (SKIPPED, DONE, CANCELLED):
            return
        node = run.spec.node(node_id)
        endpoint_id = (
            node.fallback.substitute_model_id if state.substituted else node.model_id
        )
        if state.first_dispatch_ms < 0:
            state.first_dispatch_ms = now
        state.status = IN_FLIGHT
        invocation = PendingInvocation(
            invocation_id=self._next_invocation_id,
            request_id=request_id,
            pipeline_id=run.spec.pipeline_id,
            node_id=node_id,
            endpoint_id=endpoint_id,
            latency_class=run.request.latency_class,
            enqueued_ms=now,
            attempts=attempt,
        )
        self._next_invocation_id += 1
        try:
            decision = self.route_fn(endpoint_id, now)
        except BreakerOpenError:
            self._apply_fallback(run, node_id, "breaker_open", now)
            return
        invocation.model_id = decision.model_id
        from .router import pick_version

        invocation.version_id = pick_version(decision.binding, self.rngs.stream("versions"))
        invocation.dispatched_ms = now
        state.model_id = decision.model_id
        state.backend = decision.backend
        state.version_id = invocation.version_id
        self.on_touch(decision.model_id, now)
        pool = self.pools[(decision.model_id, decision.backend)]
        from . import pools as pools_mod

        placement = pool.acquire_slot(run.request.latency_class, now, invocation)
        if placement.kind == pools_mod.REJECTED:
            self._drop_run(run, node_id, now)
            return
        self.invocations[invocation.invocation_id] = invocation
        if placement.kind == pools_mod.WARM_SLOT:
            invocation.instance_id = placement.instance_id
            self.begin_service(invocation, now, cold=False)
        elif placement.kind == pools_mod.COLD_START:
            invocation.instance_id = placement.instance_id
            invocation.cold = True
        # QUEUED: the pool grants a slot later via release/cold-complete

    def begin_service(self, invocation: PendingInvocation, now: int, cold: bool):
        """Slot granted: sample service time and failure, then schedule completion."""
        spec = self.registry[invocation.model_id]
        invocation.cold = invocation.cold or cold
        invocation.service_ms = spec.service_time.sample(self.rngs.stream("service"))
        invocation.will_fail = (
            spec.failure_prob > 0
            and self.rngs.stream("failures").random() < spec.failure_prob
        )
        invocation.held_since_ms = now
        self.schedule(
            engine.SERVICE_COMPLETE,
            now + invocation.service_ms,
            invocation=invocation.invocation_id,
        )

    def on_service_complete(self, invocation_id: int, now: int):
        invocation = self.invocations.pop(invocation_id, None)
        if invocation is None:
            return
        run = self.runs.get(invocation.request_id)
        backend = run.node_states[invocation.node_id].backend if run else "serverless"
        pool = self.pools[(invocation.model_id, backend)]
        granted = pool.release_slot(
            invocation.instance_id, now, invocation.pipeline_id, invocation.held_since_ms
        )
        if granted is not None:
            self.begin_service(granted, now, cold=False)
        self.metrics.note_service(invocation.model_id, invocation.service_ms, invocation.cold)
        if run is None or run.finished:
            return
        state = run.node_states[invocation.node_id]
        if state.status != IN_FLIGHT:
            return
        if invocation.will_fail:
            self.record_breaker(invocation.endpoint_id, False, now)
            self._node_failed(run, invocation, now)
            return
        self.record_breaker(invocation.endpoint_id, True, now)
        state.status = DONE
        state.latency_ms = now - state.first_dispatch_ms
        state.cold = invocation.cold
        self.metrics.note_node_latency(invocation.model_id, now, state.latency_ms)
        self._node_settled(run, invocation.node_id, now)

    def on_cold_start_granted(self, granted: list[PendingInvocation], now: int):
        # Runs dropped/aborted in the meantime still occupy and release their
        # slot at completion, keeping pool accounting conserved.
        for invocation in granted:
            self.begin_service(invocation, now, cold=True)

    # -- failure handling -----------------------------------------------------

    def _node_failed(self, run: PipelineRun, invocation: PendingInvocation, now: int):
        if invocation.attempts < self.retry_max:
            self.schedule(
                engine.DISPATCH_NODE,
                now + self.retry_delay_ms,
                request=run.request.request_id,
                node=invocation.node_id,
                attempt=invocation.attempts + 1,
            )
            return
        self._apply_fallback(run, invocation.node_id, "retries_exhausted", now)

    def _apply_fallback(self, run: PipelineRun, node_id: str, error: str, now: int):
        """Skip, substitute (once), or abort after a breaker-open or exhausted retries."""
        node = run.spec.node(node_id)
        state = run.node_states[node_id]
        policy = node.fallback
        if policy.kind is FallbackKind.SUBSTITUTE and not state.substituted:
            state.substituted = True
            self.schedule(
                engine.DISPATCH_NODE,
                now,
                request=run.request.request_id,
                node=node_id,
                attempt=0,
            )
            return
        if policy.kind is FallbackKind.ABORT:
            state.status = FAILED
            self._abort_run(run, now)
            return
        # SKIP, or a substituted attempt that failed again (depth-1 cap)
        state.status = SKIPPED
        state.skip_reason = "fallback"
        self._node_settled(run, node_id, now)

    def _abort_run(self, run: PipelineRun, now: int):
        run.aborted = True
        for state in run.node_states.values():
            if state.status in (PENDING, IN_FLIGHT):
                state.status = CANCELLED
        self._finish_run(run, now, outcome=ABORTED)

    def _drop_run(self, run: PipelineRun, node_id: str, now: int):
        run.node_states[node_id].status = FAILED
        for state in run.node_states.values():
            if state.status in (PENDING, IN_FLIGHT):
                state.status = CANCELLED
        self._finish_run(run, now, outcome=DROPPED)

    # -- completion ------------------------------------------------------------

    def _node_settled(self, run: PipelineRun, node_id: str, now: int):
        run.frontier_pending.discard(node_id)
        if run.frontier_pending:
            return
        if run.sequential:
            self._dispatch_next_sequential(run, now)
            return
        at = now + (run.frontier_overhead_ms if run.frontier_dispatched >= 2 else 0)
        self._start_frontier(run, run.frontier_idx + 1, at)

    def _finish_run(self, run: PipelineRun, at: int, outcome: str | None = None):
        if run.finished:
            return
        if outcome is None:
            outcome = DEGRADED if run.degraded_nodes() else SUCCESS
        run.outcome = outcome
        run.finished_ms = at
        self.metrics.record_run(run)

    def finalize_incomplete(self, now: int):
        for run in self.runs.values():
            if not run.finished:
                run.outcome = INCOMPLETE
                run.finished_ms = now
                self.metrics.record_run(run)

"""Prediction-service layer: endpoint routing with auto-mode spill-over,
latency-class priority queueing, per-endpoint circuit breakers, and weighted
version selection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping

import numpy as np

from .domain import DeploymentMode, LatencyClass, ModelSpec, UnknownModel

if TYPE_CHECKING:
    from .pools import Pool


class RouterError(Exception):
    pass


class UnknownEndpoint(RouterError):
    def __init__(self, endpoint_id):
        self.endpoint_id = endpoint_id
        super().__init__(f"no binding for endpoint {endpoint_id!r}")


class BreakerOpenError(RouterError):
    """Structured fast-fail consumed by the orchestrator's fallback handling."""

    def __init__(self, endpoint_id):
        self.endpoint_id = endpoint_id
        super().__init__(f"circuit breaker open for endpoint {endpoint_id!r}")


class Empty(RouterError):
    pass


@dataclass
class PendingInvocation:
    """One node invocation attempt flowing through routing, queueing, and service."""

    invocation_id: int
    request_id: str
    pipeline_id: str
    node_id: str
    endpoint_id: str
    latency_class: LatencyClass
    enqueued_ms: int
    attempts: int = 0
    # resolved at dispatch / service start
    model_id: str = ""
    version_id: str = ""
    dispatched_ms: int = 0
    service_ms: int = 0
    will_fail: bool = False
    cold: bool = False
    substituted: bool = False
    instance_id: int = -1
    held_since_ms: int = 0


class ClassPriorityQueue:
    """Interactive strictly before batch; FIFO by (enqueued_ms, seq) within a class."""

    def __init__(self):
        self._lanes: dict[int, deque] = {0: deque(), 1: deque()}
        self._seq = 0
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def enqueue(self, item, latency_class: LatencyClass, enqueued_ms: int) -> int:
        self._lanes[latency_class.priority].append((enqueued_ms, self._seq, item))
        self._seq += 1
        self._len += 1
        return self._len

    def dequeue(self):
        for rank in (0, 1):
            lane = self._lanes[rank]
            if lane:
                self._len -= 1
                return lane.popleft()[2]
        raise Empty("priority queue is empty")


@dataclass(frozen=True)
class BreakerConfig:
    window: int = 20
    min_samples: int = 10
    failure_threshold: float = 0.5
    cooldown_ms: int = 30_000
    probe_budget: int = 1


CLOSED = "closed"
OPEN = "open"
HALF_OPEN = "half_open"


class CircuitBreaker:
    """Count-window breaker: Closed -> Open on failure fraction, Half-Open probes."""

    def __init__(self, endpoint_id: str, config: BreakerConfig = BreakerConfig()):
        self.endpoint_id = endpoint_id
        self.config = config
        self.state = CLOSED
        self.until_ms = 0
        self.window: deque[bool] = deque(maxlen=config.window)
        self.probes_in_flight = 0

    def allow(self, now: int) -> bool:
        """Whether a new attempt may proceed; admitting a half-open probe reserves it."""
        if self.state == OPEN:
            return False
        if self.state == HALF_OPEN:
            if self.probes_in_flight < self.config.probe_budget:
                self.probes_in_flight += 1
                return True
            return False
        return True

    def record(self, success: bool, now: int) -> str:
        if self.state == HALF_OPEN:
            self.probes_in_flight = max(0, self.probes_in_flight - 1)
            if success:
                self.state = CLOSED
                self.window.clear()
            else:
                self._trip(now)
            return self.state
        self.window.append(success)
        if self.state == CLOSED and len(self.window) >= self.config.min_samples:
            failures = sum(1 for ok in self.window if not ok)
            if failures / len(self.window) >= self.config.failure_threshold:
                self._trip(now)
        return self.state

    def _trip(self, now: int):
        self.state = OPEN
        self.until_ms = now + self.config.cooldown_ms
        self.probes_in_flight = 0

    def on_timer(self, now: int) -> str:
        if self.state == OPEN and now >= self.until_ms:
            self.state = HALF_OPEN
            self.probes_in_flight = 0
        return self.state


@dataclass(frozen=True)
class EndpointBinding:
    endpoint_id: str
    model_id: str
    mode: DeploymentMode
    versions: tuple[tuple[str, float], ...]


class RoutingTable:
    """endpoint_id -> model binding, hot-swappable at simulated-time boundaries.

    Requests dispatched at t >= effective_at use the new binding; in-flight
    invocations keep the binding they were dispatched with.
    """

    def __init__(self, registry: Mapping[str, ModelSpec]):
        self.registry = registry
        self._timelines: dict[str, list[tuple[int, EndpointBinding]]] = {}
        for model in registry.values():
            self.bind(model.model_id, model.model_id, model.mode, model.versions, 0)

    def bind(self, endpoint_id, model_id, mode, versions, effective_at_ms):
        if model_id not in self.registry:
            raise UnknownModel(model_id)
        binding = EndpointBinding(endpoint_id, model_id, DeploymentMode(mode), tuple(versions))
        timeline = self._timelines.setdefault(endpoint_id, [])
        timeline.append((effective_at_ms, binding))
        timeline.sort(key=lambda pair: pair[0])

    def hot_swap(self, endpoint_id, model_id, mode, versions, effective_at_ms):
        self.bind(endpoint_id, model_id, mode, versions, effective_at_ms)

    def resolve(self, endpoint_id: str, now: int) -> EndpointBinding:
        timeline = self._timelines.get(endpoint_id)
        if not timeline:
            raise UnknownEndpoint(endpoint_id)
        current = None
        for effective_at, binding in timeline:
            if effective_at <= now:
                current = binding
        if current is None:
            raise UnknownEndpoint(endpoint_id)
        return current

    def endpoints(self):
        return sorted(self._timelines)


def pick_version(binding: EndpointBinding, rng: np.random.Generator) -> str:
    """Sample a version id proportionally to its normalized weight."""
    draw = rng.random()
    acc = 0.0
    for version_id, weight in binding.versions:
        acc += weight
        if draw < acc:
            return version_id
    return binding.versions[-1][0]


@dataclass(frozen=True)
class RouteDecision:
    model_id: str
    backend: str  # "dedicated" | "serverless"
    binding: EndpointBinding


def route(
    endpoint_id: str,
    table: RoutingTable,
    pools: Mapping[tuple[str, str], "Pool"],
    breakers: Mapping[str, CircuitBreaker],
    now: int,
) -> RouteDecision:
    """Resolve an endpoint to a backend pool, consulting the breaker first.

    Auto mode routes to the dedicated pool iff a dedicated instance exists with
    instantaneous utilization (busy / total slots) below the model's capacity
    threshold, else spills over to serverless. An Open breaker raises before
    any pool is touched.
    """
    binding = table.resolve(endpoint_id, now)
    breaker = breakers.get(endpoint_id)
    if breaker is not None and not breaker.allow(now):
        raise BreakerOpenError(endpoint_id)
    spec = table.registry[binding.model_id]
    if binding.mode is DeploymentMode.DEDICATED:
        return RouteDecision(binding.model_id, "dedicated", binding)
    if binding.mode is DeploymentMode.SERVERLESS:
        return RouteDecision(binding.model_id, "serverless", binding)
    dedicated = pools.get((binding.model_id, "dedicated"))
    if dedicated is not None and dedicated.total_slots() > 0:
        if dedicated.instantaneous_utilization() < spec.capacity_threshold:
            return RouteDecision(binding.model_id, "dedicated", binding)
    return RouteDecision(binding.model_id, "serverless", binding)

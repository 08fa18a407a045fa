"""Shared domain types: model endpoints, pipeline DAGs, requests, latency classes.

Everything here is immutable after validation and safe to share across
concurrent simulation runs. All durations are integer simulated milliseconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np

# z-score of the 95th percentile of the standard normal, used to fit a
# lognormal service-time distribution from (median, p95).
_Z95 = 1.6448536269514722

DAY_MS = 24 * 60 * 60 * 1000


class DomainError(Exception):
    """Base class for scenario/domain validation failures."""


class CycleDetected(DomainError):
    def __init__(self, node_ids):
        self.node_ids = tuple(sorted(node_ids))
        super().__init__(f"pipeline DAG contains a cycle involving nodes {self.node_ids}")


class UnknownModel(DomainError):
    def __init__(self, model_id):
        self.model_id = model_id
        super().__init__(f"unknown model id {model_id!r}")


class InvalidProbability(DomainError):
    def __init__(self, node_id, value):
        self.node_id = node_id
        self.value = value
        super().__init__(f"node {node_id!r} has invocation_prob {value!r} outside [0, 1]")


class DeploymentMode(str, Enum):
    SERVERLESS = "serverless"
    DEDICATED = "dedicated"
    AUTO = "auto"


class LatencyClass(str, Enum):
    INTERACTIVE = "interactive"
    BATCH = "batch"

    @property
    def priority(self) -> int:
        """Lower value is served first; interactive strictly outranks batch."""
        return 0 if self is LatencyClass.INTERACTIVE else 1


@dataclass(frozen=True)
class ServiceTime:
    """Service-time distribution: a fixed value or a lognormal fit to (median, p95)."""

    kind: str  # "deterministic" | "lognormal"
    value_ms: int = 0
    median_ms: int = 0
    p95_ms: int = 0

    @classmethod
    def fixed(cls, value_ms: int) -> "ServiceTime":
        if value_ms < 0:
            raise DomainError(f"deterministic service time must be >= 0, got {value_ms}")
        return cls(kind="deterministic", value_ms=int(value_ms))

    @classmethod
    def lognormal(cls, median_ms: int, p95_ms: int) -> "ServiceTime":
        if median_ms <= 0 or p95_ms < median_ms:
            raise DomainError(
                f"lognormal service time needs 0 < median <= p95, got ({median_ms}, {p95_ms})"
            )
        return cls(kind="lognormal", median_ms=int(median_ms), p95_ms=int(p95_ms))

    @property
    def nominal_ms(self) -> int:
        """Central value used as the autoscaler's prior before samples arrive."""
        return self.value_ms if self.kind == "deterministic" else self.median_ms

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "deterministic":
            return self.value_ms
        mu = math.log(self.median_ms)
        sigma = math.log(self.p95_ms / self.median_ms) / _Z95
        return max(1, int(round(rng.lognormal(mu, sigma))))


@dataclass(frozen=True)
class ModelSpec:
    """A model endpoint's performance, capacity, cost, and deployment profile."""

    model_id: str
    cold_start_ms: int
    service_time: ServiceTime
    per_instance_concurrency: int = 1
    mode: DeploymentMode = DeploymentMode.SERVERLESS
    dedicated_count: int = 0
    provisioned_min: int = 0
    capacity_threshold: float = 0.85
    idle_timeout_ms: int = 900_000  # 15 minutes
    failure_prob: float = 0.0
    cost_dedicated_per_hour: float = 0.0
    cost_serverless_per_busy_second: float = 0.0
    versions: tuple[tuple[str, float], ...] = (("default", 1.0),)

    def __post_init__(self):
        if self.cold_start_ms <= 0:
            raise DomainError(f"{self.model_id}: cold_start_ms must be positive")
        if self.per_instance_concurrency <= 0:
            raise DomainError(f"{self.model_id}: per_instance_concurrency must be positive")
        if self.dedicated_count < 0 or self.provisioned_min < 0:
            raise DomainError(f"{self.model_id}: instance counts must be nonnegative")
        if not 0.0 < self.capacity_threshold <= 1.0:
            raise DomainError(f"{self.model_id}: capacity_threshold must be in (0, 1]")
        if self.idle_timeout_ms <= 0:
            raise DomainError(f"{self.model_id}: idle_timeout_ms must be positive")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise DomainError(f"{self.model_id}: failure_prob must be in [0, 1]")
        object.__setattr__(self, "versions", _normalize_versions(self.model_id, self.versions))


def _normalize_versions(model_id, versions):
    versions = tuple((str(v), float(w)) for v, w in versions)
    if not versions:
        raise DomainError(f"{model_id}: at least one version required")
    if any(w < 0 for _, w in versions):
        raise DomainError(f"{model_id}: version weights must be nonnegative")
    total = sum(w for _, w in versions)
    if total <= 0:
        raise DomainError(f"{model_id}: version weights must sum to a positive value")
    return tuple((v, w / total) for v, w in versions)


class FallbackKind(str, Enum):
    SKIP = "skip"
    SUBSTITUTE = "substitute"
    ABORT = "abort"


@dataclass(frozen=True)
class FallbackPolicy:
    kind: FallbackKind
    substitute_model_id: str | None = None

    @classmethod
    def skip(cls):
        return cls(FallbackKind.SKIP)

    @classmethod
    def abort(cls):
        return cls(FallbackKind.ABORT)

    @classmethod
    def substitute(cls, model_id: str):
        return cls(FallbackKind.SUBSTITUTE, model_id)


@dataclass(frozen=True)
class PipelineNode:
    node_id: str
    model_id: str
    depends_on: frozenset[str] = frozenset()
    invocation_prob: float = 1.0
    fallback: FallbackPolicy = FallbackPolicy(FallbackKind.ABORT)


@dataclass(frozen=True)
class Preprocessing:
    """Lightweight (serverless function) or proxy (always-on microservice) front end."""

    kind: str = "lightweight"  # "lightweight" | "proxy"
    added_latency_ms: int = 0
    always_on_cost_per_hour: float = 0.0

    def __post_init__(self):
        if self.kind not in ("lightweight", "proxy"):
            raise DomainError(f"unknown preprocessing kind {self.kind!r}")
        if self.kind == "lightweight" and (self.added_latency_ms or self.always_on_cost_per_hour):
            raise DomainError("lightweight preprocessing carries no latency or cost")
        if self.added_latency_ms < 0 or self.always_on_cost_per_hour < 0:
            raise DomainError("proxy latency/cost must be nonnegative")


@dataclass(frozen=True)
class PipelineSpec:
    pipeline_id: str
    nodes: tuple[PipelineNode, ...]
    latency_class: LatencyClass = LatencyClass.INTERACTIVE
    fanout_overhead_range_ms: tuple[int, int] = (45, 80)
    preprocessing: Preprocessing = Preprocessing()
    sla_ms: int = 8000

    def node(self, node_id: str) -> PipelineNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)


@dataclass(frozen=True)
class Request:
    request_id: str
    pipeline_id: str
    arrival_ms: int
    latency_class: LatencyClass


def validate_pipeline(spec: PipelineSpec, registry: Mapping[str, ModelSpec]) -> PipelineSpec:
    """Check DAG shape, model references, probabilities, and fallback targets.

    Returns the spec unchanged on success; raises a DomainError subclass otherwise.
    """
    if not spec.nodes:
        raise DomainError(f"pipeline {spec.pipeline_id!r} has no nodes")
    ids = [n.node_id for n in spec.nodes]
    if len(set(ids)) != len(ids):
        raise DomainError(f"pipeline {spec.pipeline_id!r} has duplicate node ids")
    lo, hi = spec.fanout_overhead_range_ms
    if lo < 0 or hi < lo:
        raise DomainError(f"pipeline {spec.pipeline_id!r}: bad fanout overhead range ({lo}, {hi})")
    if spec.sla_ms <= 0:
        raise DomainError(f"pipeline {spec.pipeline_id!r}: sla_ms must be positive")
    known = set(ids)
    for n in spec.nodes:
        if not 0.0 <= n.invocation_prob <= 1.0:
            raise InvalidProbability(n.node_id, n.invocation_prob)
        if n.model_id not in registry:
            raise UnknownModel(n.model_id)
        for dep in n.depends_on:
            if dep not in known:
                raise DomainError(
                    f"pipeline {spec.pipeline_id!r}: node {n.node_id!r} depends on unknown {dep!r}"
                )
        if n.fallback.kind is FallbackKind.SUBSTITUTE:
            if n.fallback.substitute_model_id not in registry:
                raise UnknownModel(n.fallback.substitute_model_id)
    topological_levels(spec)  # raises CycleDetected on cyclic graphs
    return spec


def topological_levels(spec: PipelineSpec) -> list[tuple[str, ...]]:
    """Group nodes into maximal parallel frontiers.

    Every node lands at the earliest level whose predecessors are all in
    strictly earlier levels; node order within a level is lexicographic so
    repeated runs are deterministic.
    """
    remaining = {n.node_id: set(n.depends_on) for n in spec.nodes}
    levels: list[tuple[str, ...]] = []
    placed: set[str] = set()
    while remaining:
        frontier = sorted(nid for nid, deps in remaining.items() if deps <= placed)
        if not frontier:
            raise CycleDetected(remaining.keys())
        levels.append(tuple(frontier))
        placed.update(frontier)
        for nid in frontier:
            del remaining[nid]
    return levels


def naive_compound_cold_start(spec: PipelineSpec, registry: Mapping[str, ModelSpec]) -> int:
    """End-to-end cold latency with zero service times and no mitigation.

    Each node's warm-up starts only when the node is dispatched, so dependency
    chains serialize cold starts: the result is the heaviest root-to-leaf path
    (sums along a path, max across parallel branches).
    """
    levels = topological_levels(spec)
    done_at: dict[str, int] = {}
    for frontier in levels:
        for nid in frontier:
            node = spec.node(nid)
            start = max((done_at[d] for d in node.depends_on), default=0)
            done_at[nid] = start + registry[node.model_id].cold_start_ms
    return max(done_at.values())

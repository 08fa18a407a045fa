"""Per-model demand tracking, concurrency-based scaling targets, and the three
cold-start mitigation tiers: coordinated pre-warming, tiered provisioned
concurrency, and scheduled warming windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from .domain import DAY_MS, ModelSpec, PipelineSpec, topological_levels

# Guards ceil() against float artifacts (e.g. 2.5 * 1.2 -> 3.0000000000000004).
_CEIL_EPS = 1e-9


@dataclass(frozen=True)
class ScalePolicy:
    headroom: float = 1.2
    alpha: float = 0.3
    min_instances: int = 0
    max_instances: int = 1000
    scale_tick_ms: int = 1000
    scale_down_cooldown_ms: int = 120_000
    enabled: bool = True

    def __post_init__(self):
        if self.headroom < 1:
            raise ValueError("headroom must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.min_instances > self.max_instances:
            raise ValueError("min_instances must be <= max_instances")


@dataclass
class RateTracker:
    """EWMA of a model's invocation rate and service time, updated on scale ticks."""

    model_id: str
    alpha: float
    ewma_rate_per_s: float = 0.0
    ewma_service_ms: float = 0.0
    last_update_ms: int = 0
    last_scale_up_ms: int = -(10 ** 12)
    count_since_tick: int = 0

    def note_invocation(self):
        self.count_since_tick += 1

    def note_service_ms(self, service_ms: int):
        if self.ewma_service_ms == 0:
            self.ewma_service_ms = float(service_ms)
        else:
            self.ewma_service_ms = (
                self.alpha * service_ms + (1 - self.alpha) * self.ewma_service_ms
            )

    def on_tick(self, now: int):
        elapsed_ms = now - self.last_update_ms
        if elapsed_ms <= 0:
            return
        observed = self.count_since_tick * 1000.0 / elapsed_ms
        self.ewma_rate_per_s = self.alpha * observed + (1 - self.alpha) * self.ewma_rate_per_s
        self.count_since_tick = 0
        self.last_update_ms = now


def target_instances(tracker: RateTracker, spec: ModelSpec, policy: ScalePolicy) -> int:
    """Little's-law instance target with headroom, clamped to policy bounds."""
    demand = (
        tracker.ewma_rate_per_s
        * tracker.ewma_service_ms
        / 1000.0
        / spec.per_instance_concurrency
        * policy.headroom
    )
    target = math.ceil(demand - _CEIL_EPS) if demand > 0 else 0
    floor = max(policy.min_instances, spec.provisioned_min)
    return max(floor, min(policy.max_instances, target))


def uniform_scaling_baseline(user_rate_factor: float) -> float:
    """Strawman comparator: every model scales by the user-request factor.

    A model invoked at ratio r per request is then over-provisioned by 1/r.
    """
    return user_rate_factor


def uniform_overprovision_factor(invocation_ratio: float) -> float:
    if invocation_ratio <= 0:
        raise ValueError("invocation ratio must be positive")
    return 1.0 / invocation_ratio


class CoordinatedWarmer:
    """First touch of any pipeline member starts parallel warm-ups of every cold
    member, converting the serial cold-start chain into a parallel max.

    A per-model dedupe window suppresses warm-up storms under concurrent first
    touches.
    """

    def __init__(self, dedupe_window_ms: int = 60_000):
        self.dedupe_window_ms = dedupe_window_ms
        self._last_trigger_ms: dict[str, int] = {}

    def prewarm_targets(
        self,
        touched_model: str,
        members_by_pipeline: Mapping[str, tuple[str, ...]],
        has_capacity,
        now: int,
    ) -> list[str]:
        """Member models needing a warm-up now; `has_capacity(model)` reports
        whether a model already has any warm-or-provisioning capacity."""
        targets: list[str] = []
        for pipeline_id in sorted(members_by_pipeline):
            members = members_by_pipeline[pipeline_id]
            if touched_model not in members:
                continue
            for model_id in members:
                if model_id in targets or has_capacity(model_id):
                    continue
                last = self._last_trigger_ms.get(model_id)
                if last is not None and now - last < self.dedupe_window_ms:
                    continue
                self._last_trigger_ms[model_id] = now
                targets.append(model_id)
        return targets


def tiered_provision_plan(
    spec: PipelineSpec, registry: Mapping[str, ModelSpec]
) -> tuple[set[str], int]:
    """Keep only the critical path's longest-cold-start model provisioned.

    Returns (models to keep warm, predicted user-perceived cold start with that
    model pre-warmed). Ties break toward the lowest model id.
    """
    levels = topological_levels(spec)
    done_at: dict[str, int] = {}
    for frontier in levels:
        for nid in frontier:
            node = spec.node(nid)
            start = max((done_at[d] for d in node.depends_on), default=0)
            done_at[nid] = start + registry[node.model_id].cold_start_ms
    # walk the critical path backwards from the latest-finishing node
    tail = min((nid for nid, t in done_at.items() if t == max(done_at.values())))
    path = [tail]
    while True:
        node = spec.node(path[-1])
        deps = sorted(node.depends_on)
        if not deps:
            break
        best = max(done_at[d] for d in deps)
        path.append(min(d for d in deps if done_at[d] == best))
    path_models = [spec.node(nid).model_id for nid in path]
    max_cold = max(registry[m].cold_start_ms for m in path_models)
    chosen = min(m for m in path_models if registry[m].cold_start_ms == max_cold)
    return {chosen}, _longest_path_with_zero(spec, registry, chosen)


def _longest_path_with_zero(spec, registry, zero_model):
    done_at: dict[str, int] = {}
    for frontier in topological_levels(spec):
        for nid in frontier:
            node = spec.node(nid)
            start = max((done_at[d] for d in node.depends_on), default=0)
            cold = 0 if node.model_id == zero_model else registry[node.model_id].cold_start_ms
            done_at[nid] = start + cold
    return max(done_at.values())


@dataclass(frozen=True)
class WarmWindow:
    model_id: str
    start_of_day_ms: int
    end_of_day_ms: int
    min_warm: int
    daily: bool = True

    def __post_init__(self):
        if not 0 <= self.start_of_day_ms < self.end_of_day_ms:
            raise ValueError("warm window must satisfy 0 <= start < end")
        if self.min_warm < 0:
            raise ValueError("min_warm must be nonnegative")


@dataclass(frozen=True)
class WarmSchedule:
    windows: tuple[WarmWindow, ...] = ()

    def __post_init__(self):
        per_model: dict[str, list[WarmWindow]] = {}
        for w in self.windows:
            per_model.setdefault(w.model_id, []).append(w)
        for model_id, windows in per_model.items():
            spans = sorted((w.start_of_day_ms, w.end_of_day_ms) for w in windows)
            for (a1, b1), (a2, _) in zip(spans, spans[1:]):
                if a2 < b1:
                    raise ValueError(f"overlapping warm windows for model {model_id}")

    def lead_starts(self, registry: Mapping[str, ModelSpec], horizon_ms: int) -> list[int]:
        """Times at which a window's lead-time warm-up becomes due within the horizon."""
        out = set()
        for w in self.windows:
            lead = registry[w.model_id].cold_start_ms
            day = 0
            while True:
                start = day * DAY_MS + w.start_of_day_ms
                if start - lead >= horizon_ms:
                    break
                out.add(max(0, start - lead))
                if not w.daily:
                    break
                day += 1
        return sorted(out)


def schedule_tick(
    schedule: WarmSchedule,
    registry: Mapping[str, ModelSpec],
    warm_counts,
    now: int,
) -> list[tuple[str, int]]:
    """Warm-up deficits due now: [(model_id, instances to start)].

    A window is in its warming period from (start - cold_start_ms) so instances
    are warm at the window start, and replacement continues until the window
    ends; `warm_counts(model)` reports current warm-or-provisioning instances.
    """
    triggers: list[tuple[str, int]] = []
    for w in schedule.windows:
        if w.min_warm == 0:
            continue
        lead = registry[w.model_id].cold_start_ms
        starts = [0] if not w.daily else [max(0, now // DAY_MS - 1), now // DAY_MS, now // DAY_MS + 1]
        active = False
        for day in starts:
            window_start = day * DAY_MS + w.start_of_day_ms
            window_end = day * DAY_MS + w.end_of_day_ms
            if window_start - lead <= now < window_end:
                active = True
                break
        if not active:
            continue
        deficit = w.min_warm - warm_counts(w.model_id)
        if deficit > 0:
            triggers.append((w.model_id, deficit))
    return triggers

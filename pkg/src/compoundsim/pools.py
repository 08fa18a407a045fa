"""Per-(model, backend) capacity: cold starts, slot bin packing, scale-to-zero,
provisioned minimums, and busy-time accounting for billing."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import engine
from .domain import LatencyClass, ModelSpec
from .router import ClassPriorityQueue, PendingInvocation


class PoolError(Exception):
    pass


class NotBusy(PoolError):
    pass


class EmptyWindow(PoolError):
    pass


PROVISIONING = "provisioning"
WARM = "warm"
RETIRED = "retired"

WARM_SLOT = "warm_slot"
COLD_START = "cold_start"
QUEUED = "queued"
REJECTED = "rejected"

BEST_FIT = "best_fit"
FIRST_AVAILABLE = "first_available"


@dataclass
class Instance:
    instance_id: int
    state: str
    created_ms: int
    ready_at_ms: int
    busy_slots: int = 0
    last_transition_ms: int = 0
    retired_ms: int | None = None
    billed_busy_ms: int = 0
    idle_epoch: int = 0
    reserved: list[PendingInvocation] = field(default_factory=list)


@dataclass(frozen=True)
class Placement:
    kind: str
    instance_id: int = -1
    ready_at_ms: int = 0
    position: int = 0
    started_new: bool = False


class Pool:
    """State machine for one model's serverless or dedicated capacity.

    Mutated only by the single-threaded event loop; `schedule` is the loop's
    scheduling callback used for idle timers and cold-start completions.
    """

    def __init__(
        self,
        spec: ModelSpec,
        backend: str,  # "serverless" | "dedicated"
        schedule,
        now: int = 0,
        packing: str = BEST_FIT,
        max_instances: int | None = None,
        max_queue_per_slot: int = 100,
    ):
        self.spec = spec
        self.backend = backend
        self.schedule = schedule
        self.packing = packing
        self.max_instances = max_instances
        self.max_queue_per_slot = max_queue_per_slot
        self.instances: dict[int, Instance] = {}
        self.queue = ClassPriorityQueue()
        self.busy_ms_by_pipeline: dict[str, int] = {}
        self.cold_starts_started = 0
        self.rejected = 0
        self.peak_instances = 0
        self._next_id = 0
        self._timeline: list[tuple[int, int, int]] = []  # (t, busy slots, provisioned slots)
        initial = spec.dedicated_count if backend == "dedicated" else spec.provisioned_min
        for _ in range(initial):
            inst = self._new_instance(now)
            inst.state = WARM
            inst.ready_at_ms = now
            if backend == "serverless":
                self._arm_idle_timer(inst, now)
        self._touch(now)

    # -- capacity views -------------------------------------------------

    def _live(self):
        return [i for i in self.instances.values() if i.state != RETIRED]

    def live_count(self) -> int:
        return len(self._live())

    def warm_or_provisioning_count(self) -> int:
        return self.live_count()

    def total_slots(self) -> int:
        return self.live_count() * self.spec.per_instance_concurrency

    def busy_total(self) -> int:
        return sum(i.busy_slots for i in self._live()) + sum(
            len(i.reserved) for i in self._live() if i.state == PROVISIONING
        )

    def instantaneous_utilization(self) -> float:
        slots = self.total_slots()
        if slots == 0:
            return 1.0
        occupied = sum(
            i.busy_slots if i.state == WARM else len(i.reserved) for i in self._live()
        )
        return occupied / slots

    # -- internal helpers -----------------------------------------------

    def _new_instance(self, now: int) -> Instance:
        inst = Instance(self._next_id, PROVISIONING, now, now, last_transition_ms=now)
        self._next_id += 1
        self.instances[inst.instance_id] = inst
        self.peak_instances = max(self.peak_instances, self.live_count())
        return inst

    def _touch(self, now: int):
        busy = sum(i.busy_slots for i in self._live() if i.state == WARM) + sum(
            len(i.reserved) for i in self._live() if i.state == PROVISIONING
        )
        self._timeline.append((now, busy, self.total_slots()))

    def _arm_idle_timer(self, inst: Instance, now: int):
        inst.idle_epoch += 1
        self.schedule(
            engine.IDLE_TIMEOUT,
            now + self.spec.idle_timeout_ms,
            model=self.spec.model_id,
            backend=self.backend,
            instance=inst.instance_id,
            epoch=inst.idle_epoch,
        )

    def _start_cold_instance(self, now: int) -> Instance:
        inst = self._new_instance(now)
        inst.ready_at_ms = now + self.spec.cold_start_ms
        self.cold_starts_started += 1
        self.schedule(
            engine.COLD_START_COMPLETE,
            inst.ready_at_ms,
            model=self.spec.model_id,
            backend=self.backend,
            instance=inst.instance_id,
        )
        return inst

    def _pick_warm(self) -> Instance | None:
        conc = self.spec.per_instance_concurrency
        candidates = [
            i for i in self._live() if i.state == WARM and i.busy_slots < conc
        ]
        if not candidates:
            return None
        if self.packing == FIRST_AVAILABLE:
            return min(candidates, key=lambda i: i.instance_id)
        # best fit: fewest free slots remaining, ties by lowest instance id
        return min(candidates, key=lambda i: (conc - i.busy_slots, i.instance_id))

    # -- spec operations --------------------------------------------------

    def acquire_slot(self, latency_class: LatencyClass, now: int, invocation) -> Placement:
        """Place an invocation: warm best-fit slot, reserve on a provisioning
        instance, start a new serverless instance, queue, or reject."""
        inst = self._pick_warm()
        if inst is not None:
            inst.busy_slots += 1
            inst.idle_epoch += 1  # invalidates any pending idle timer
            inst.last_transition_ms = now
            self._touch(now)
            return Placement(WARM_SLOT, inst.instance_id)
        conc = self.spec.per_instance_concurrency
        provisioning = [
            i for i in self._live() if i.state == PROVISIONING and len(i.reserved) < conc
        ]
        if provisioning:
            inst = min(provisioning, key=lambda i: (i.ready_at_ms, i.instance_id))
            inst.reserved.append(invocation)
            self._touch(now)
            return Placement(COLD_START, inst.instance_id, inst.ready_at_ms)
        if self.backend == "serverless" and (
            self.max_instances is None or self.live_count() < self.max_instances
        ):
            inst = self._start_cold_instance(now)
            inst.reserved.append(invocation)
            self._touch(now)
            return Placement(COLD_START, inst.instance_id, inst.ready_at_ms, started_new=True)
        if len(self.queue) < self.max_queue_per_slot * max(1, self.total_slots()):
            position = self.queue.enqueue(invocation, latency_class, now)
            return Placement(QUEUED, position=position)
        self.rejected += 1
        return Placement(REJECTED)

    def release_slot(self, instance_id: int, now: int, pipeline_id: str, held_since_ms: int):
        """Free a slot, bill its busy span, and hand the slot to the next queued
        invocation if one is waiting. Returns the granted invocation or None."""
        inst = self.instances.get(instance_id)
        if inst is None or inst.state != WARM or inst.busy_slots <= 0:
            raise NotBusy(f"{self.spec.model_id}/{self.backend} instance {instance_id} has no busy slot")
        held = now - held_since_ms
        inst.billed_busy_ms += held
        self.busy_ms_by_pipeline[pipeline_id] = self.busy_ms_by_pipeline.get(pipeline_id, 0) + held
        inst.busy_slots -= 1
        inst.last_transition_ms = now
        granted = None
        if len(self.queue):
            granted = self.queue.dequeue()
            inst.busy_slots += 1
            granted.instance_id = inst.instance_id
        elif inst.busy_slots == 0 and self.backend == "serverless":
            self._arm_idle_timer(inst, now)
        self._touch(now)
        return granted

    def on_cold_start_complete(self, instance_id: int, now: int) -> list:
        """Instance becomes warm; reserved invocations (then queued ones, up to
        concurrency) receive their slots in arrival order."""
        inst = self.instances.get(instance_id)
        if inst is None or inst.state != PROVISIONING:
            return []
        inst.state = WARM
        inst.last_transition_ms = now
        granted = list(inst.reserved)
        inst.reserved = []
        conc = self.spec.per_instance_concurrency
        while len(granted) < conc and len(self.queue):
            granted.append(self.queue.dequeue())
        inst.busy_slots = len(granted)
        for invocation in granted:
            invocation.instance_id = inst.instance_id
        if inst.busy_slots == 0 and self.backend == "serverless":
            self._arm_idle_timer(inst, now)
        self._touch(now)
        return granted

    def handle_idle_timeout(self, instance_id: int, epoch: int, now: int) -> bool:
        """Retire iff still warm-idle, untouched since the timer was set, and the
        provisioned-minimum floor survives."""
        inst = self.instances.get(instance_id)
        if inst is None or inst.state != WARM or inst.busy_slots != 0:
            return False
        if inst.idle_epoch != epoch:
            return False
        if self.backend != "serverless":
            return False
        if self.live_count() - 1 < self.spec.provisioned_min:
            return False
        self._retire(inst, now)
        return True

    def start_warmup(self, now: int) -> Instance | None:
        """Proactively start one instance (no reservation attached)."""
        if self.backend != "serverless":
            return None
        if self.max_instances is not None and self.live_count() >= self.max_instances:
            return None
        inst = self._start_cold_instance(now)
        self._touch(now)
        return inst

    def retire_idle_down_to(self, target: int, now: int) -> int:
        """Autoscaler scale-down: retire warm-idle instances, newest first, while
        the live count stays above max(target, provisioned_min)."""
        floor = max(target, self.spec.provisioned_min)
        idle = sorted(
            (i for i in self._live() if i.state == WARM and i.busy_slots == 0),
            key=lambda i: -i.instance_id,
        )
        retired = 0
        for inst in idle:
            if self.live_count() <= floor:
                break
            self._retire(inst, now)
            retired += 1
        return retired

    def _retire(self, inst: Instance, now: int):
        inst.state = RETIRED
        inst.retired_ms = now
        inst.last_transition_ms = now
        self._touch(now)

    def finalize(self, now: int):
        self._touch(now)

    def utilization(self, window_start_ms: int, window_end_ms: int) -> float:
        """Busy slot-ms over provisioned slot-ms in the window; provisioning time
        counts as provisioned but not busy."""
        if window_end_ms <= window_start_ms:
            raise EmptyWindow(f"bad window ({window_start_ms}, {window_end_ms})")
        busy_ms = 0
        provisioned_ms = 0
        entries = self._timeline
        for idx, (t, busy, provisioned) in enumerate(entries):
            t_next = entries[idx + 1][0] if idx + 1 < len(entries) else window_end_ms
            lo = max(t, window_start_ms)
            hi = min(t_next, window_end_ms)
            if hi > lo:
                busy_ms += busy * (hi - lo)
                provisioned_ms += provisioned * (hi - lo)
        if provisioned_ms == 0:
            raise EmptyWindow("no provisioned capacity in window")
        return busy_ms / provisioned_ms

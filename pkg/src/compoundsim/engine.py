"""Deterministic event loop: integer-ms clock, (time, seq)-ordered queue, labeled RNG streams."""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field

import numpy as np

# Recorded in every report header so event logs from different builds are comparable.
RNG_ALGORITHM = "numpy-pcg64"

# Event kinds. Payloads are small JSON-safe dicts.
REQUEST_ARRIVAL = "RequestArrival"
DISPATCH_NODE = "DispatchNode"
COLD_START_COMPLETE = "ColdStartComplete"
SERVICE_COMPLETE = "ServiceComplete"
SCALE_TICK = "ScaleTick"
WARMUP_TRIGGER = "WarmupTrigger"
IDLE_TIMEOUT = "IdleTimeout"
BREAKER_TIMER = "BreakerTimer"
SCHEDULE_TICK = "ScheduleTick"


class PastTime(Exception):
    def __init__(self, fire_at_ms: int, now_ms: int):
        super().__init__(f"cannot schedule event at {fire_at_ms} ms; clock is at {now_ms} ms")


@dataclass(frozen=True)
class SimEvent:
    fire_at_ms: int
    seq: int
    kind: str
    payload: dict

    def log_line(self) -> str:
        payload = json.dumps(self.payload, sort_keys=True, separators=(",", ":"))
        return f"{self.fire_at_ms}\t{self.seq}\t{self.kind}\t{payload}"


class EventLoop:
    """Single-threaded scheduler; ties at the same millisecond break by schedule order."""

    def __init__(self, log_events: bool = False):
        self.now = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._next_seq = 0
        self.log_events = log_events
        self.event_log: list[str] = []

    def schedule(self, kind: str, fire_at_ms: int, **payload) -> int:
        if fire_at_ms < self.now:
            raise PastTime(fire_at_ms, self.now)
        seq = self._next_seq
        self._next_seq += 1
        event = SimEvent(int(fire_at_ms), seq, kind, payload)
        heapq.heappush(self._heap, (event.fire_at_ms, seq, event))
        return seq

    def pending(self) -> int:
        return len(self._heap)

    def run_until(self, t_end_ms: int, handler) -> int:
        """Process every event with fire_at_ms <= t_end_ms in (time, seq) order.

        The clock follows the processed events; with nothing due it jumps to
        t_end_ms.
        """
        processed = 0
        while self._heap and self._heap[0][0] <= t_end_ms:
            _, _, event = heapq.heappop(self._heap)
            self.now = event.fire_at_ms
            if self.log_events:
                self.event_log.append(event.log_line())
            handler(event)
            processed += 1
        if processed == 0:
            self.now = t_end_ms
        return processed


def _label_key(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngStreams:
    """Label-partitioned PCG64 streams derived from one master seed.

    Labels hash through sha256 (not Python's salted hash), so the same
    (seed, label) pair reproduces the same stream across process restarts,
    and adding a new consumer label never perturbs existing streams.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, label: str) -> np.random.Generator:
        gen = self._streams.get(label)
        if gen is None:
            seq = np.random.SeedSequence([self.master_seed & 0xFFFFFFFFFFFFFFFF, _label_key(label)])
            gen = np.random.Generator(np.random.PCG64(seq))
            self._streams[label] = gen
        return gen

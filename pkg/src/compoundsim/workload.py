"""Arrival-stream generation (steady, diurnal, spiking) and trace replay with variance amplification."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import LatencyClass, Request


class WorkloadError(Exception):
    pass


class ParseError(WorkloadError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"trace line {line_no}: {message}")


class EmptyTrace(WorkloadError):
    pass


class ZeroVariance(WorkloadError):
    pass


class TooShort(WorkloadError):
    pass


@dataclass(frozen=True)
class PoissonProcess:
    rate_per_s: float

    def __post_init__(self):
        if self.rate_per_s < 0:
            raise WorkloadError(f"rate must be >= 0, got {self.rate_per_s}")


@dataclass(frozen=True)
class PiecewiseRate:
    """Sorted (start_ms, rate_per_s) segments; each rate holds until the next start."""

    segments: tuple[tuple[int, float], ...]

    def __post_init__(self):
        starts = [s for s, _ in self.segments]
        if not self.segments or starts != sorted(starts) or len(set(starts)) != len(starts):
            raise WorkloadError("piecewise segments must be sorted and non-overlapping")
        if any(r < 0 for _, r in self.segments):
            raise WorkloadError("piecewise rates must be >= 0")


@dataclass(frozen=True)
class SpikeOverlay:
    base: "ArrivalProcess"
    factor: float
    window: tuple[int, int]

    def __post_init__(self):
        if self.factor < 1:
            raise WorkloadError(f"spike factor must be >= 1, got {self.factor}")
        if self.window[0] >= self.window[1]:
            raise WorkloadError("spike window must be a nonempty (start, end)")


ArrivalProcess = PoissonProcess | PiecewiseRate | SpikeOverlay


@dataclass(frozen=True)
class Workload:
    process: ArrivalProcess
    pipeline_id: str
    latency_class: LatencyClass


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: int
    pipeline_id: str
    latency_class: LatencyClass


def rate_segments(process: ArrivalProcess, horizon_ms: int) -> list[tuple[int, int, float]]:
    """Flatten a process into piecewise-constant (start, end, rate_per_s) segments."""
    if isinstance(process, PoissonProcess):
        return [(0, horizon_ms, process.rate_per_s)]
    if isinstance(process, PiecewiseRate):
        out = []
        for i, (start, rate) in enumerate(process.segments):
            end = process.segments[i + 1][0] if i + 1 < len(process.segments) else horizon_ms
            if start < horizon_ms and end > start:
                out.append((start, min(end, horizon_ms), rate))
        return out
    if isinstance(process, SpikeOverlay):
        lo, hi = process.window
        out = []
        for start, end, rate in rate_segments(process.base, horizon_ms):
            for a, b in ((start, min(end, lo)), (max(start, lo), min(end, hi)), (max(start, hi), end)):
                if b > a:
                    factor = process.factor if lo <= a < hi else 1.0
                    out.append((a, b, rate * factor))
        return out
    raise WorkloadError(f"unknown arrival process {process!r}")


def generate_arrivals(
    process: ArrivalProcess,
    pipeline_id: str,
    latency_class: LatencyClass,
    horizon_ms: int,
    rng: np.random.Generator,
    id_prefix: str = "r",
) -> list[Request]:
    """Poisson arrivals over piecewise-constant rates; strictly increasing integer ms.

    Exponential gaps are drawn at the active segment rate; a draw crossing a
    segment boundary restarts at the boundary (memorylessness keeps this
    exact). Millisecond ties resolve by a +1 ms shift.
    """
    if horizon_ms <= 0:
        raise WorkloadError("horizon must be positive")
    times: list[int] = []
    t = 0.0
    for start, end, rate in rate_segments(process, horizon_ms):
        t = max(t, float(start))
        if rate <= 0:
            continue
        mean_gap_ms = 1000.0 / rate
        while True:
            t_next = t + rng.exponential(mean_gap_ms)
            if t_next >= end:
                t = float(end)
                break
            t = t_next
            ms = int(math.floor(t))
            if times and ms <= times[-1]:
                ms = times[-1] + 1
            if ms >= horizon_ms:
                break
            times.append(ms)
    return [
        Request(f"{id_prefix}{i}", pipeline_id, ms, latency_class)
        for i, ms in enumerate(times)
    ]


def _gaps(records) -> list[int]:
    return [b.arrival_ms - a.arrival_ms for a, b in zip(records, records[1:])]


def mean_and_cov(gaps) -> tuple[float, float]:
    mean = sum(gaps) / len(gaps)
    if mean == 0:
        return 0.0, 0.0
    var = sum((g - mean) ** 2 for g in gaps) / len(gaps)
    return mean, math.sqrt(var) / mean


def amplify_variance(trace: list[TraceRecord], cov_multiplier: float) -> list[TraceRecord]:
    """Stretch inter-arrival variability while preserving count and mean gap.

    Each gap's deviation from the mean gap is scaled by cov_multiplier, gaps
    clip at 1 ms, and the whole span rescales so the mean gap is preserved.
    Record order and pipeline/class fields are untouched.
    """
    if len(trace) < 3:
        raise TooShort(f"need >= 3 records, got {len(trace)}")
    if cov_multiplier < 1:
        raise WorkloadError(f"cov_multiplier must be >= 1, got {cov_multiplier}")
    gaps = _gaps(trace)
    mean, cov = mean_and_cov(gaps)
    if cov == 0:
        raise ZeroVariance("inter-arrival times are constant; variance cannot be amplified")
    if cov_multiplier == 1.0:
        return list(trace)
    scaled = [max(1.0, mean + cov_multiplier * (g - mean)) for g in gaps]
    factor = sum(gaps) / sum(scaled)
    base = trace[0].arrival_ms
    out = [TraceRecord(base, trace[0].pipeline_id, trace[0].latency_class)]
    acc = 0.0
    last = base
    for rec, g in zip(trace[1:], scaled):
        acc += g * factor
        ms = max(last + 1, base + int(round(acc)))
        out.append(TraceRecord(ms, rec.pipeline_id, rec.latency_class))
        last = ms
    return out


def load_trace(path) -> list[TraceRecord]:
    """Read a CSV trace (header arrival_ms,pipeline_id,latency_class); sorted on load."""
    records: list[TraceRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyTrace(f"{path} is empty")
        if [h.strip() for h in header] != ["arrival_ms", "pipeline_id", "latency_class"]:
            raise ParseError(1, f"bad header {header!r}")
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(line_no, f"expected 3 fields, got {len(row)}")
            try:
                arrival = int(row[0])
            except ValueError:
                raise ParseError(line_no, f"bad arrival_ms {row[0]!r}") from None
            if arrival < 0:
                raise ParseError(line_no, f"negative arrival_ms {arrival}")
            try:
                lat = LatencyClass(row[2].strip().lower())
            except ValueError:
                raise ParseError(line_no, f"bad latency_class {row[2]!r}") from None
            records.append(TraceRecord(arrival, row[1].strip(), lat))
    if not records:
        raise EmptyTrace(f"{path} has a header but no records")
    records.sort(key=lambda r: r.arrival_ms)
    return records


def save_trace(path, records: list[TraceRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arrival_ms", "pipeline_id", "latency_class"])
        for r in records:
            writer.writerow([r.arrival_ms, r.pipeline_id, r.latency_class.value])


def requests_from_trace(records: list[TraceRecord], id_prefix: str = "t") -> list[Request]:
    """Trace records as requests with strictly increasing arrivals (+1 ms tie shift)."""
    out: list[Request] = []
    last = -1
    for i, rec in enumerate(records):
        ms = max(rec.arrival_ms, last + 1)
        out.append(Request(f"{id_prefix}{i}", rec.pipeline_id, ms, rec.latency_class))
        last = ms
    return out

"""Scenario configuration: YAML schema, validation, and round-trip serialization.

A scenario file is fully self-contained: two loads of the same file produce
identical simulations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .domain import (
    DeploymentMode,
    DomainError,
    FallbackKind,
    FallbackPolicy,
    LatencyClass,
    ModelSpec,
    PipelineNode,
    PipelineSpec,
    Preprocessing,
    ServiceTime,
    validate_pipeline,
)
from .router import BreakerConfig
from .scaling import ScalePolicy, WarmSchedule, WarmWindow
from .workload import (
    ArrivalProcess,
    PiecewiseRate,
    PoissonProcess,
    SpikeOverlay,
    Workload,
    WorkloadError,
)


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class EndpointSwap:
    at_ms: int
    model_id: str
    mode: DeploymentMode
    versions: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class EndpointConfig:
    endpoint_id: str
    model_id: str
    mode: DeploymentMode
    versions: tuple[tuple[str, float], ...]
    swaps: tuple[EndpointSwap, ...] = ()


@dataclass(frozen=True)
class Policies:
    scaling: ScalePolicy = ScalePolicy()
    coordinated_warming: bool = False
    dedupe_window_ms: int = 60_000
    breaker: BreakerConfig = BreakerConfig()
    breaker_enabled: bool = True
    retry_max: int = 2
    retry_delay_ms: int = 100
    packing: str = "best_fit"
    max_queue_per_slot: int = 100
    drain_ms: int = 300_000
    schedule_tick_ms: int = 10_000


@dataclass(frozen=True)
class ReportSettings:
    interval_ms: int = 60_000
    breach_multiplier: float = 2.0
    steady_window_ms: tuple[int, int] | None = None
    events_log: bool = False
    runs_log: bool = False


@dataclass
class Scenario:
    name: str
    master_seed: int
    horizon_ms: int
    models: dict[str, ModelSpec]
    pipelines: dict[str, PipelineSpec]
    workloads: tuple[Workload, ...] = ()
    endpoints: tuple[EndpointConfig, ...] = ()
    schedule: WarmSchedule = WarmSchedule()
    policies: Policies = Policies()
    report: ReportSettings = ReportSettings()


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return mapping[key]


def _service_time(raw, context: str) -> ServiceTime:
    if isinstance(raw, (int, float)):
        return ServiceTime.fixed(int(raw))
    if isinstance(raw, dict):
        if "deterministic_ms" in raw:
            return ServiceTime.fixed(int(raw["deterministic_ms"]))
        if "median_ms" in raw and "p95_ms" in raw:
            return ServiceTime.lognormal(int(raw["median_ms"]), int(raw["p95_ms"]))
    raise ConfigError(
        f"{context}: service_time must be a number, {{deterministic_ms}}, or {{median_ms, p95_ms}}"
    )


def _versions(raw, context: str):
    if raw is None:
        return (("default", 1.0),)
    out = []
    for item in raw:
        out.append((str(_require(item, "id", context)), float(_require(item, "weight", context))))
    return tuple(out)


def _model(raw: dict) -> ModelSpec:
    context = f"model {raw.get('id', '?')!r}"
    try:
        return ModelSpec(
            model_id=str(_require(raw, "id", context)),
            cold_start_ms=int(_require(raw, "cold_start_ms", context)),
            service_time=_service_time(_require(raw, "service_time", context), context),
            per_instance_concurrency=int(raw.get("per_instance_concurrency", 1)),
            mode=DeploymentMode(raw.get("mode", "serverless")),
            dedicated_count=int(raw.get("dedicated_count", 0)),
            provisioned_min=int(raw.get("provisioned_min", 0)),
            capacity_threshold=float(raw.get("capacity_threshold", 0.85)),
            idle_timeout_ms=int(raw.get("idle_timeout_ms", 900_000)),
            failure_prob=float(raw.get("failure_prob", 0.0)),
            cost_dedicated_per_hour=float(raw.get("cost_dedicated_per_hour", 0.0)),
            cost_serverless_per_busy_second=float(raw.get("cost_serverless_per_busy_second", 0.0)),
            versions=_versions(raw.get("versions"), context),
        )
    except (DomainError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _fallback(raw, context: str) -> FallbackPolicy:
    if raw is None or raw == "abort":
        return FallbackPolicy.abort()
    if raw == "skip":
        return FallbackPolicy.skip()
    if isinstance(raw, dict) and "substitute" in raw:
        return FallbackPolicy.substitute(str(raw["substitute"]))
    raise ConfigError(f"{context}: fallback must be 'skip', 'abort', or {{substitute: model}}")


def _pipeline(raw: dict) -> PipelineSpec:
    context = f"pipeline {raw.get('id', '?')!r}"
    nodes = []
    for nraw in _require(raw, "nodes", context):
        ncontext = f"{context} node {nraw.get('id', '?')!r}"
        nodes.append(
            PipelineNode(
                node_id=str(_require(nraw, "id", ncontext)),
                model_id=str(_require(nraw, "model", ncontext)),
                depends_on=frozenset(str(d) for d in nraw.get("depends_on", [])),
                invocation_prob=float(nraw.get("invocation_prob", 1.0)),
                fallback=_fallback(nraw.get("fallback"), ncontext),
            )
        )
    pre_raw = raw.get("preprocessing", {"kind": "lightweight"})
    try:
        preprocessing = Preprocessing(
            kind=str(pre_raw.get("kind", "lightweight")),
            added_latency_ms=int(pre_raw.get("added_latency_ms", 0)),
            always_on_cost_per_hour=float(pre_raw.get("always_on_cost_per_hour", 0.0)),
        )
        overhead = raw.get("fanout_overhead_ms", [45, 80])
        return PipelineSpec(
            pipeline_id=str(_require(raw, "id", context)),
            nodes=tuple(nodes),
            latency_class=LatencyClass(raw.get("latency_class", "interactive")),
            fanout_overhead_range_ms=(int(overhead[0]), int(overhead[1])),
            preprocessing=preprocessing,
            sla_ms=int(raw.get("sla_ms", 8000)),
        )
    except (DomainError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def _process(raw: dict, context: str) -> ArrivalProcess:
    kind = _require(raw, "kind", context)
    try:
        if kind == "poisson":
            return PoissonProcess(float(_require(raw, "rate_per_s", context)))
        if kind == "piecewise":
            segments = tuple(
                (int(seg[0]), float(seg[1])) for seg in _require(raw, "segments", context)
            )
            return PiecewiseRate(segments)
        if kind == "spike":
            window = _require(raw, "window", context)
            return SpikeOverlay(
                base=_process(_require(raw, "base", context), context),
                factor=float(_require(raw, "factor", context)),
                window=(int(window[0]), int(window[1])),
            )
    except WorkloadError as exc:
        raise ConfigError(f"{context}: {exc}") from exc
    raise ConfigError(f"{context}: unknown arrival process kind {kind!r}")


def _hhmm_to_ms(text: str, context: str) -> int:
    try:
        hours, minutes = text.split(":")
        return (int(hours) * 3600 + int(minutes) * 60) * 1000
    except ValueError:
        raise ConfigError(f"{context}: window times must be 'HH:MM', got {text!r}") from None


def _ms_to_hhmm(ms: int) -> str:
    total_minutes = ms // 60_000
    return f"{total_minutes // 60:02d}:{total_minutes % 60:02d}"


def from_dict(raw: dict) -> Scenario:
    if not isinstance(raw, dict):
        raise ConfigError("scenario config must be a mapping")
    name = str(raw.get("name", "scenario"))
    try:
        master_seed = int(raw.get("master_seed", 0))
        horizon_ms = int(_require(raw, "horizon_ms", "scenario"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from exc
    if horizon_ms <= 0:
        raise ConfigError("scenario: horizon_ms must be positive")

    models: dict[str, ModelSpec] = {}
    for mraw in _require(raw, "models", "scenario"):
        model = _model(mraw)
        if model.model_id in models:
            raise ConfigError(f"duplicate model id {model.model_id!r}")
        models[model.model_id] = model

    pipelines: dict[str, PipelineSpec] = {}
    for praw in _require(raw, "pipelines", "scenario"):
        pipe = _pipeline(praw)
        if pipe.pipeline_id in pipelines:
            raise ConfigError(f"duplicate pipeline id {pipe.pipeline_id!r}")
        try:
            validate_pipeline(pipe, models)
        except DomainError as exc:
            raise ConfigError(f"pipeline {pipe.pipeline_id!r}: {exc}") from exc
        pipelines[pipe.pipeline_id] = pipe

    endpoints = []
    for eraw in raw.get("endpoints", []):
        context = f"endpoint {eraw.get('id', '?')!r}"
        model_id = str(_require(eraw, "model", context))
        if model_id not in models:
            raise ConfigError(f"{context}: unknown model {model_id!r}")
        swaps = []
        for sraw in eraw.get("swaps", []):
            swap_model = str(_require(sraw, "model", context))
            if swap_model not in models:
                raise ConfigError(f"{context}: swap references unknown model {swap_model!r}")
            swaps.append(
                EndpointSwap(
                    at_ms=int(_require(sraw, "at_ms", context)),
                    model_id=swap_model,
                    mode=DeploymentMode(sraw.get("mode", models[swap_model].mode.value)),
                    versions=_versions(sraw.get("versions"), context) if sraw.get("versions") else models[swap_model].versions,
                )
            )
        endpoints.append(
            EndpointConfig(
                endpoint_id=str(_require(eraw, "id", context)),
                model_id=model_id,
                mode=DeploymentMode(eraw.get("mode", models[model_id].mode.value)),
                versions=_versions(eraw.get("versions"), context) if eraw.get("versions") else models[model_id].versions,
                swaps=tuple(swaps),
            )
        )

    workloads = []
    for i, wraw in enumerate(raw.get("workloads", [])):
        context = f"workload[{i}]"
        pipeline_id = str(_require(wraw, "pipeline", context))
        if pipeline_id not in pipelines:
            raise ConfigError(f"{context}: unknown pipeline {pipeline_id!r}")
        latency_class = LatencyClass(
            wraw.get("latency_class", pipelines[pipeline_id].latency_class.value)
        )
        workloads.append(
            Workload(
                process=_process(_require(wraw, "process", context), context),
                pipeline_id=pipeline_id,
                latency_class=latency_class,
            )
        )

    windows = []
    for sraw in raw.get("schedules", []):
        context = f"schedule for model {sraw.get('model', '?')!r}"
        model_id = str(_require(sraw, "model", context))
        if model_id not in models:
            raise ConfigError(f"{context}: unknown model")
        window = _require(sraw, "window", context)
        windows.append(
            WarmWindow(
                model_id=model_id,
                start_of_day_ms=_hhmm_to_ms(str(window[0]), context),
                end_of_day_ms=_hhmm_to_ms(str(window[1]), context),
                min_warm=int(_require(sraw, "min_warm", context)),
                daily=bool(sraw.get("daily", True)),
            )
        )
    try:
        schedule = WarmSchedule(tuple(windows))
    except ValueError as exc:
        raise ConfigError(f"schedules: {exc}") from exc

    polraw = raw.get("policies", {})
    scaling_raw = polraw.get("scaling", {})
    try:
        policies = Policies(
            scaling=ScalePolicy(
                headroom=float(scaling_raw.get("headroom", 1.2)),
                alpha=float(scaling_raw.get("alpha", 0.3)),
                min_instances=int(scaling_raw.get("min_instances", 0)),
                max_instances=int(scaling_raw.get("max_instances", 1000)),
                scale_tick_ms=int(scaling_raw.get("scale_tick_ms", 1000)),
                scale_down_cooldown_ms=int(scaling_raw.get("scale_down_cooldown_ms", 120_000)),
                enabled=bool(scaling_raw.get("enabled", True)),
            ),
            coordinated_warming=bool(polraw.get("coordinated_warming", False)),
            dedupe_window_ms=int(polraw.get("dedupe_window_ms", 60_000)),
            breaker=BreakerConfig(
                window=int(polraw.get("breaker", {}).get("window", 20)),
                min_samples=int(polraw.get("breaker", {}).get("min_samples", 10)),
                failure_threshold=float(polraw.get("breaker", {}).get("failure_threshold", 0.5)),
                cooldown_ms=int(polraw.get("breaker", {}).get("cooldown_ms", 30_000)),
                probe_budget=int(polraw.get("breaker", {}).get("probe_budget", 1)),
            ),
            breaker_enabled=bool(polraw.get("breaker_enabled", True)),
            retry_max=int(polraw.get("retry_max", 2)),
            retry_delay_ms=int(polraw.get("retry_delay_ms", 100)),
            packing=str(polraw.get("packing", "best_fit")),
            max_queue_per_slot=int(polraw.get("max_queue_per_slot", 100)),
            drain_ms=int(polraw.get("drain_ms", 300_000)),
            schedule_tick_ms=int(polraw.get("schedule_tick_ms", 10_000)),
        )
    except ValueError as exc:
        raise ConfigError(f"policies: {exc}") from exc
    if policies.packing not in ("best_fit", "first_available"):
        raise ConfigError(f"policies: unknown packing {policies.packing!r}")

    for endpoint in endpoints:
        if endpoint.mode is DeploymentMode.DEDICATED and models[endpoint.model_id].dedicated_count < 1:
            raise ConfigError(
                f"endpoint {endpoint.endpoint_id!r}: dedicated mode requires dedicated_count >= 1"
            )

    rraw = raw.get("report", {})
    steady = rraw.get("steady_window_ms")
    report = ReportSettings(
        interval_ms=int(rraw.get("interval_ms", 60_000)),
        breach_multiplier=float(rraw.get("breach_multiplier", 2.0)),
        steady_window_ms=(int(steady[0]), int(steady[1])) if steady else None,
        events_log=bool(rraw.get("events_log", False)),
        runs_log=bool(rraw.get("runs_log", False)),
    )

    return Scenario(
        name=name,
        master_seed=master_seed,
        horizon_ms=horizon_ms,
        models=models,
        pipelines=pipelines,
        workloads=tuple(workloads),
        endpoints=tuple(endpoints),
        schedule=schedule,
        policies=policies,
        report=report,
    )


def _service_time_dict(st: ServiceTime):
    if st.kind == "deterministic":
        return {"deterministic_ms": st.value_ms}
    return {"median_ms": st.median_ms, "p95_ms": st.p95_ms}


def _process_dict(process: ArrivalProcess) -> dict:
    if isinstance(process, PoissonProcess):
        return {"kind": "poisson", "rate_per_s": process.rate_per_s}
    if isinstance(process, PiecewiseRate):
        return {"kind": "piecewise", "segments": [[s, r] for s, r in process.segments]}
    return {
        "kind": "spike",
        "base": _process_dict(process.base),
        "factor": process.factor,
        "window": list(process.window),
    }


def to_dict(scenario: Scenario) -> dict:
    models = []
    for m in scenario.models.values():
        models.append(
            {
                "id": m.model_id,
                "cold_start_ms": m.cold_start_ms,
                "service_time": _service_time_dict(m.service_time),
                "per_instance_concurrency": m.per_instance_concurrency,
                "mode": m.mode.value,
                "dedicated_count": m.dedicated_count,
                "provisioned_min": m.provisioned_min,
                "capacity_threshold": m.capacity_threshold,
                "idle_timeout_ms": m.idle_timeout_ms,
                "failure_prob": m.failure_prob,
                "cost_dedicated_per_hour": m.cost_dedicated_per_hour,
                "cost_serverless_per_busy_second": m.cost_serverless_per_busy_second,
                "versions": [{"id": v, "weight": w} for v, w in m.versions],
            }
        )
    pipelines = []
    for p in scenario.pipelines.values():
        nodes = []
        for n in p.nodes:
            fallback: object = n.fallback.kind.value
            if n.fallback.kind is FallbackKind.SUBSTITUTE:
                fallback = {"substitute": n.fallback.substitute_model_id}
            nodes.append(
                {
                    "id": n.node_id,
                    "model": n.model_id,
                    "depends_on": sorted(n.depends_on),
                    "invocation_prob": n.invocation_prob,
                    "fallback": fallback,
                }
            )
        pipelines.append(
            {
                "id": p.pipeline_id,
                "latency_class": p.latency_class.value,
                "fanout_overhead_ms": list(p.fanout_overhead_range_ms),
                "preprocessing": {
                    "kind": p.preprocessing.kind,
                    "added_latency_ms": p.preprocessing.added_latency_ms,
                    "always_on_cost_per_hour": p.preprocessing.always_on_cost_per_hour,
                },
                "sla_ms": p.sla_ms,
                "nodes": nodes,
            }
        )
    endpoints = []
    for e in scenario.endpoints:
        endpoints.append(
            {
                "id": e.endpoint_id,
                "model": e.model_id,
                "mode": e.mode.value,
                "versions": [{"id": v, "weight": w} for v, w in e.versions],
                "swaps": [
                    {
                        "at_ms": s.at_ms,
                        "model": s.model_id,
                        "mode": s.mode.value,
                        "versions": [{"id": v, "weight": w} for v, w in s.versions],
                    }
                    for s in e.swaps
                ],
            }
        )
    p = scenario.policies
    report = {
        "interval_ms": scenario.report.interval_ms,
        "breach_multiplier": scenario.report.breach_multiplier,
        "events_log": scenario.report.events_log,
        "runs_log": scenario.report.runs_log,
    }
    if scenario.report.steady_window_ms is not None:
        report["steady_window_ms"] = list(scenario.report.steady_window_ms)
    return {
        "name": scenario.name,
        "master_seed": scenario.master_seed,
        "horizon_ms": scenario.horizon_ms,
        "models": models,
        "pipelines": pipelines,
        "endpoints": endpoints,
        "workloads": [
            {
                "pipeline": w.pipeline_id,
                "latency_class": w.latency_class.value,
                "process": _process_dict(w.process),
            }
            for w in scenario.workloads
        ],
        "schedules": [
            {
                "model": w.model_id,
                "window": [_ms_to_hhmm(w.start_of_day_ms), _ms_to_hhmm(w.end_of_day_ms)],
                "min_warm": w.min_warm,
                "daily": w.daily,
            }
            for w in scenario.schedule.windows
        ],
        "policies": {
            "scaling": {
                "headroom": p.scaling.headroom,
                "alpha": p.scaling.alpha,
                "min_instances": p.scaling.min_instances,
                "max_instances": p.scaling.max_instances,
                "scale_tick_ms": p.scaling.scale_tick_ms,
                "scale_down_cooldown_ms": p.scaling.scale_down_cooldown_ms,
                "enabled": p.scaling.enabled,
            },
            "coordinated_warming": p.coordinated_warming,
            "dedupe_window_ms": p.dedupe_window_ms,
            "breaker": {
                "window": p.breaker.window,
                "min_samples": p.breaker.min_samples,
                "failure_threshold": p.breaker.failure_threshold,
                "cooldown_ms": p.breaker.cooldown_ms,
                "probe_budget": p.breaker.probe_budget,
            },
            "breaker_enabled": p.breaker_enabled,
            "retry_max": p.retry_max,
            "retry_delay_ms": p.retry_delay_ms,
            "packing": p.packing,
            "max_queue_per_slot": p.max_queue_per_slot,
            "drain_ms": p.drain_ms,
            "schedule_tick_ms": p.schedule_tick_ms,
        },
        "report": report,
    }


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply `--set dotted.path=value` pairs onto a raw config mapping."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        path, _, value_text = item.partition("=")
        value = yaml.safe_load(value_text)
        keys = path.split(".")
        target = raw
        for key in keys[:-1]:
            if not isinstance(target.get(key), dict):
                target[key] = {}
            target = target[key]
        target[keys[-1]] = value
    return raw


def load_scenario(path, overrides: list[str] | None = None) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if overrides:
        raw = apply_overrides(raw, overrides)
    return from_dict(raw)


def dump_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(scenario), fh, sort_keys=False)

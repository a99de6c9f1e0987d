"""Synthetic microservice telemetry with configurable fault injection.

Generates schema-compatible telemetry for a service topology under a
sinusoidal diurnal load, then injects any of the ten supported anomaly
behaviours into chosen intervals.  Output is written in the same directory
layout the ingestion pipeline consumes, so the whole stack is testable at
desk scale without the real dataset.

Generation works on *rate-level* series (per-interval increments for the
cumulative counters, levels for the instantaneous gauges).  Faults perturb
these rates inside their interval only; cumulative counters are integrated
at serialization time.  Response times couple to load through an
M/M/1-style saturation term (per-call time ~ base / (1 - utilization)), so
overload anomalies emerge from the mechanism rather than painted values.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ScenarioError
from .graph import Topology
from .pipeline import (
    CUMULATIVE_METRICS,
    DEFAULT_SERVICES,
    POLL_INTERVAL_S,
    TABLE_METRICS,
    FaultInterval,
    ServiceTelemetry,
    write_corpus,
    write_labels,
)

__all__ = [
    "ANOMALY_TYPES",
    "DEFAULT_CALL_EDGES",
    "DEFAULT_STRENGTHS",
    "WEAK_STRENGTHS",
    "WorkloadModel",
    "FaultSpec",
    "RawTelemetry",
    "generate_normal",
    "inject",
    "finalize",
    "scenario",
    "default_faults",
]

ANOMALY_TYPES = [
    "service-down",
    "high-cpu",
    "high-user-load",
    "high-fileio",
    "memory-leak",
    "packet-loss",
    "rt-delay",
    "out-of-order",
    "low-bandwidth",
    "high-latency",
]

# RobotShop-style call graph: caller -> callee.
DEFAULT_CALL_EDGES = [
    ("web", "catalogue"),
    ("web", "user"),
    ("web", "cart"),
    ("web", "shipping"),
    ("web", "payment"),
    ("web", "ratings"),
    ("catalogue", "mongodb"),
    ("user", "mongodb"),
    ("user", "redis"),
    ("cart", "redis"),
    ("shipping", "mysql"),
    ("ratings", "mysql"),
    ("payment", "rabbitmq"),
    ("payment", "user"),
    ("payment", "cart"),
    ("dispatch", "rabbitmq"),
]

# Default strengths produce clearly separable faults; the four network
# anomalies also get a weak variant that is intentionally hard to detect.
DEFAULT_STRENGTHS = {
    "service-down": {},
    "high-cpu": {"cpu_multiplier": 10.0},
    "high-user-load": {"user_multiplier": 8.0},
    "high-fileio": {"io_multiplier": 10.0},
    "memory-leak": {"leak_bytes": 300e6},
    "packet-loss": {"loss_fraction": 0.8},
    "rt-delay": {"delay_ms": 800.0},
    "out-of-order": {"reorder_fraction": 0.8},
    "low-bandwidth": {"bandwidth_kbps": 1.0, "burst_bytes": 64.0},
    "high-latency": {"latency_ms": 1200.0},
}

WEAK_STRENGTHS = {
    "packet-loss": {"loss_fraction": 0.5},
    "out-of-order": {"reorder_fraction": 0.25},
    "low-bandwidth": {"bandwidth_kbps": 1.0, "burst_bytes": 256.0},
    "high-latency": {"latency_ms": 200.0},
}

# Default fault target per anomaly type (services with interesting
# neighborhoods, mirroring where such faults were staged).
DEFAULT_TARGETS = {
    "service-down": "mongodb",
    "high-cpu": "dispatch",
    "high-user-load": "web",
    "high-fileio": "mysql",
    "memory-leak": "user",
    "packet-loss": "user",
    "rt-delay": "catalogue",
    "out-of-order": "user",
    "low-bandwidth": "cart",
    "high-latency": "shipping",
}


@dataclass
class FaultSpec:
    anomaly_type: str
    target_service: str
    start_ts: float
    end_ts: float
    strength: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.anomaly_type not in ANOMALY_TYPES:
            raise ScenarioError(
                f"unknown anomaly type {self.anomaly_type!r}; "
                f"known: {ANOMALY_TYPES}"
            )
        if self.end_ts <= self.start_ts:
            raise ScenarioError("fault interval must have positive length")
        merged = dict(DEFAULT_STRENGTHS[self.anomaly_type])
        merged.update(self.strength)
        if any(v <= 0 for v in merged.values()):
            raise ScenarioError("strength parameters must be positive")
        self.strength = merged

    def interval(self) -> FaultInterval:
        return FaultInterval(self.anomaly_type, self.target_service,
                             self.start_ts, self.end_ts)


@dataclass
class WorkloadModel:
    services: list[str] = field(default_factory=lambda: list(DEFAULT_SERVICES))
    call_edges: list[tuple[str, str]] = field(
        default_factory=lambda: list(DEFAULT_CALL_EDGES))
    diurnal_period_s: float = 7200.0
    diurnal_amplitude: float = 0.4   # load swings 1 +/- amplitude
    noise_scale: float = 0.04
    base_utilization: float = 0.35
    seed: int = 0
    baselines: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.diurnal_amplitude < 0 or self.diurnal_amplitude >= 1:
            raise ScenarioError("diurnal_amplitude must be in [0, 1)")
        self.call_edges = [tuple(e) for e in self.call_edges]
        if not self.baselines:
            self.baselines = _default_baselines(self.services, self.seed)

    def topology(self) -> Topology:
        return Topology.from_edges(self.services, self.call_edges)

    def callees(self, service: str) -> list[str]:
        return [b for a, b in self.call_edges if a == service]

    def callers(self, service: str) -> list[str]:
        return [a for a, b in self.call_edges if b == service]

    @classmethod
    def from_dict(cls, doc: dict) -> "WorkloadModel":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "services": list(self.services),
            "call_edges": [list(e) for e in self.call_edges],
            "diurnal_period_s": self.diurnal_period_s,
            "diurnal_amplitude": self.diurnal_amplitude,
            "noise_scale": self.noise_scale,
            "base_utilization": self.base_utilization,
            "seed": self.seed,
            "baselines": self.baselines,
        }


def _default_baselines(services, seed) -> dict:
    rng = np.random.default_rng(seed ^ 0x5EED)
    out = {}
    for s in services:
        out[s] = {
            "cpu_rate": float(rng.uniform(0.05, 0.4)),        # cpu-s per s
            "mem_bytes": float(rng.uniform(1e8, 6e8)),
            "fs_usage_bytes": float(rng.uniform(5e7, 4e8)),
            "fs_io_rate": float(rng.uniform(0.002, 0.03)),    # io-s per s
            "net_bytes_rate": float(rng.uniform(2e4, 4e5)),   # bytes per s
            "calls_per_s": float(rng.uniform(2.0, 12.0)),     # per link
            "rt_per_call_s": float(rng.uniform(0.02, 0.15)),
        }
    return out


@dataclass
class RawTelemetry:
    """Rate-level series for one service before integration.

    ``rates`` hold per-interval increments for cumulative metrics; ``levels``
    hold instantaneous gauges.  ``rt_rates`` / ``call_rates`` are
    per-interval per-link response-time sums and call counts.
    """

    service: str
    timestamps: np.ndarray
    levels: dict[str, np.ndarray]
    rates: dict[str, np.ndarray]
    rt_rates: dict[str, np.ndarray]
    call_rates: dict[str, np.ndarray]


def _noisy(rng, base, n, scale):
    return np.maximum(base * (1.0 + scale * rng.standard_normal(n)), 0.0)


def generate_normal(model: WorkloadModel, duration_s: float,
                    start_ts: float = 0.0, seed_offset: int = 0
                    ) -> dict[str, RawTelemetry]:
    """Generate rate-level telemetry for every service over ``duration_s``."""
    n_steps = int(duration_s // POLL_INTERVAL_S)
    if n_steps < 1:
        raise ScenarioError("duration shorter than one polling interval")
    ts = start_ts + np.arange(n_steps) * POLL_INTERVAL_S
    load = 1.0 + model.diurnal_amplitude * np.sin(
        2.0 * np.pi * ts / model.diurnal_period_s)
    rng = np.random.default_rng((model.seed, seed_offset))
    interval = POLL_INTERVAL_S
    out = {}
    for service in model.services:
        b = model.baselines[service]
        noise = model.noise_scale
        rho = np.minimum(model.base_utilization * load, 0.95)
        satur = 1.0 / (1.0 - rho)
        callees = model.callees(service)
        call_rates = {}
        rt_rates = {}
        for peer in callees:
            calls = _noisy(rng, b["calls_per_s"] * interval, n_steps, noise) * load
            per_call = b["rt_per_call_s"] * satur * (
                1.0 + noise * rng.standard_normal(n_steps))
            rt_rates[peer] = np.maximum(calls * per_call, 0.0)
            call_rates[peer] = calls
        traffic = load * _noisy(rng, 1.0, n_steps, noise)
        bytes_rate = b["net_bytes_rate"] * interval * traffic
        pkt_rate = bytes_rate / 500.0
        cpu = _noisy(rng, b["cpu_rate"] * interval, n_steps, noise) * load
        fs_io = _noisy(rng, b["fs_io_rate"] * interval, n_steps, noise) * load
        rates = {
            "container_memory_failures_total": _noisy(rng, 0.02, n_steps, 5.0),
            "container_memory_failcnt": np.zeros(n_steps),
            "container_cpu_usage_seconds_total": cpu,
            "container_cpu_user_seconds_total": cpu * 0.7,
            "container_cpu_system_seconds_total": cpu * 0.3,
            "container_network_receive_bytes_total": bytes_rate,
            "container_network_receive_errors_total": _noisy(rng, 0.01, n_steps, 5.0),
            "container_network_receive_packets_dropped_total": _noisy(
                rng, 0.02, n_steps, 5.0),
            "container_network_receive_packets_total": pkt_rate,
            "container_network_transmit_bytes_total": bytes_rate * 0.8,
            "container_network_transmit_errors_total": _noisy(rng, 0.01, n_steps, 5.0),
            "container_network_transmit_packets_dropped_total": _noisy(
                rng, 0.02, n_steps, 5.0),
            "container_network_transmit_packets_total": pkt_rate * 0.8,
            "container_fs_io_time_seconds_total": fs_io,
            "container_fs_write_seconds_total": fs_io * 0.6,
        }
        mem = _noisy(rng, b["mem_bytes"], n_steps, noise * 0.2)
        levels = {
            "container_memory_rss": mem,
            "container_memory_usage_bytes": mem * 1.15,
            "container_memory_working_set_bytes": mem * 0.9,
            "container_fs_usage_bytes": _noisy(rng, b["fs_usage_bytes"],
                                               n_steps, noise * 0.1),
        }
        out[service] = RawTelemetry(
            service=service, timestamps=ts.copy(), levels=levels, rates=rates,
            rt_rates=rt_rates, call_rates=call_rates,
        )
    return out


def _span(raw: RawTelemetry, fault: FaultSpec) -> slice:
    ts = raw.timestamps
    inside = (ts >= fault.start_ts) & (ts <= fault.end_ts)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise ScenarioError(
            f"fault interval [{fault.start_ts}, {fault.end_ts}] lies outside "
            "the generated span"
        )
    return slice(int(idx[0]), int(idx[-1]) + 1)


def inject(raw: dict[str, RawTelemetry], fault: FaultSpec,
           model: WorkloadModel, rng=None) -> FaultInterval:
    """Apply ``fault`` to the rate-level telemetry in place.

    Only the fault interval (and causally affected peer links) change;
    everything outside the interval is untouched.
    """
    if fault.target_service not in raw:
        raise ScenarioError(f"unknown target service {fault.target_service!r}")
    if rng is None:
        tag = zlib.crc32(fault.anomaly_type.encode())
        rng = np.random.default_rng((model.seed, tag))
    target = raw[fault.target_service]
    sp = _span(target, fault)
    s = fault.strength
    kind = fault.anomaly_type

    if kind == "service-down":
        for series in target.rates.values():
            series[sp] = 0.0
        for series in target.levels.values():
            series[sp] = 0.0
        for series in target.rt_rates.values():
            series[sp] = 0.0
        for series in target.call_rates.values():
            series[sp] = 0.0
        # callers time out against the dead service: a burst of timeout
        # latency on the first few steps, then flatline
        for caller in model.callers(fault.target_service):
            peer_rt = raw[caller].rt_rates.get(fault.target_service)
            if peer_rt is None:
                continue
            csp = _span(raw[caller], fault)
            calls = raw[caller].call_rates[fault.target_service]
            burst = min(3, csp.stop - csp.start)
            peer_rt[csp] = 0.0
            peer_rt[csp.start:csp.start + burst] = (
                calls[csp.start:csp.start + burst] * 10.0)  # 10 s timeouts
            calls[csp.start + burst:csp.stop] = 0.0

    elif kind == "high-cpu":
        mult = s["cpu_multiplier"]
        for m in ("container_cpu_usage_seconds_total",
                  "container_cpu_user_seconds_total",
                  "container_cpu_system_seconds_total"):
            target.rates[m][sp] *= mult

    elif kind == "high-user-load":
        mult = s["user_multiplier"]
        rho0 = model.base_utilization
        satur = (1.0 - rho0) / (1.0 - min(rho0 * mult, 0.95))
        for svc in raw.values():
            ssp = _span(svc, fault)
            for m in ("container_cpu_usage_seconds_total",
                      "container_cpu_user_seconds_total",
                      "container_cpu_system_seconds_total"):
                svc.rates[m][ssp] *= mult * 0.8
            for m in ("container_network_receive_bytes_total",
                      "container_network_transmit_bytes_total",
                      "container_network_receive_packets_total",
                      "container_network_transmit_packets_total"):
                svc.rates[m][ssp] *= mult
            for peer in svc.call_rates:
                svc.call_rates[peer][ssp] *= mult
                svc.rt_rates[peer][ssp] *= mult * satur

    elif kind == "high-fileio":
        mult = s["io_multiplier"]
        target.rates["container_fs_io_time_seconds_total"][sp] *= mult
        target.rates["container_fs_write_seconds_total"][sp] *= mult
        target.levels["container_fs_usage_bytes"][sp] *= 1.0 + 0.1 * mult

    elif kind == "memory-leak":
        # allocation grows fastest right after the leak starts
        width = sp.stop - sp.start
        ramp = s["leak_bytes"] * np.sqrt(np.linspace(0.0, 1.0, width))
        for m in ("container_memory_rss", "container_memory_usage_bytes",
                  "container_memory_working_set_bytes"):
            target.levels[m][sp] += ramp

    elif kind == "packet-loss":
        # packets are lost in transit, so the container's own dropped
        # counters stay flat; the loss shows up as reduced goodput and as
        # retransmission latency (mean transmissions grow like 1/(1-p))
        loss = s["loss_fraction"]
        if loss >= 1.0:
            raise ScenarioError("loss_fraction must be < 1")
        for direction in ("receive", "transmit"):
            target.rates[f"container_network_{direction}_packets_total"][sp] *= (
                1.0 - loss)
            target.rates[f"container_network_{direction}_bytes_total"][sp] *= (
                1.0 - loss)
        retry = 1.0 / (1.0 - loss) ** 2
        jitter = 1.0 + loss * np.abs(rng.standard_normal(sp.stop - sp.start))
        for peer in target.rt_rates:
            target.rt_rates[peer][sp] *= retry * jitter
        for caller in model.callers(fault.target_service):
            peer_rt = raw[caller].rt_rates.get(fault.target_service)
            if peer_rt is not None:
                csp = _span(raw[caller], fault)
                peer_rt[csp] *= retry * (
                    1.0 + loss * np.abs(rng.standard_normal(csp.stop - csp.start)))

    elif kind == "rt-delay":
        delay_s = s["delay_ms"] / 1000.0
        for peer in target.rt_rates:
            target.rt_rates[peer][sp] += delay_s * target.call_rates[peer][sp]

    elif kind == "out-of-order":
        # reordering stalls connections until retransmit timeouts fire:
        # an additive per-call delay proportional to the reordered fraction
        # (~2.5 s timeout with backoff), heavy jitter, and duplicate packets
        frac = s["reorder_fraction"]
        width = sp.stop - sp.start
        rto_s = 2.5
        for peer in target.rt_rates:
            jitter = 1.0 + frac * np.abs(rng.standard_normal(width))
            target.rt_rates[peer][sp] = (
                target.rt_rates[peer][sp] * jitter
                + frac * rto_s * target.call_rates[peer][sp])
        for direction in ("receive", "transmit"):
            key = f"container_network_{direction}_packets_total"
            target.rates[key][sp] *= 1.0 + 0.3 * frac

    elif kind == "low-bandwidth":
        cap_bytes = s["bandwidth_kbps"] * 125.0 * POLL_INTERVAL_S
        severity = 256.0 / s["burst_bytes"]
        stall = np.ones(sp.stop - sp.start)
        for direction in ("receive", "transmit"):
            key = f"container_network_{direction}_bytes_total"
            demand = target.rates[key][sp]
            stall = np.maximum(stall, demand / cap_bytes)
            target.rates[key][sp] = np.minimum(demand, cap_bytes)
        for peer in target.rt_rates:
            target.rt_rates[peer][sp] *= 1.0 + 0.02 * severity * stall

    elif kind == "high-latency":
        lat_s = s["latency_ms"] / 1000.0
        for peer in target.rt_rates:
            target.rt_rates[peer][sp] += lat_s * target.call_rates[peer][sp]

    return fault.interval()


def finalize(raw: dict[str, RawTelemetry]) -> dict[str, ServiceTelemetry]:
    """Integrate rate-level telemetry into cumulative, schema-ready series."""
    out = {}
    for service, r in raw.items():
        metrics = {}
        for m in TABLE_METRICS:
            if m in CUMULATIVE_METRICS:
                metrics[m] = np.cumsum(r.rates[m])
            else:
                metrics[m] = r.levels[m].copy()
        out[service] = ServiceTelemetry(
            service=service,
            timestamps=r.timestamps.copy(),
            metrics=metrics,
            response_times={p: np.cumsum(v) for p, v in r.rt_rates.items()},
            call_counts={p: np.cumsum(v) for p, v in r.call_rates.items()},
        )
    return out


def default_faults(model: WorkloadModel, duration_s: float,
                   margin_s: float = 120.0, weak: bool = False
                   ) -> list[FaultSpec]:
    """One fault per anomaly type, centered in its own segment of
    ``duration_s`` with ``margin_s`` of normal lead-in and tail."""
    strengths = dict(DEFAULT_STRENGTHS)
    if weak:
        strengths.update(WEAK_STRENGTHS)
    return [
        FaultSpec(
            anomaly_type=atype,
            target_service=DEFAULT_TARGETS[atype],
            start_ts=margin_s,
            end_ts=duration_s - margin_s,
            strength=strengths[atype],
        )
        for atype in ANOMALY_TYPES
    ]


def scenario(model: WorkloadModel, out_dir, normal_duration_s: float,
             anomaly_duration_s: float = 90 * 60.0,
             faults: list[FaultSpec] | None = None) -> list[FaultInterval]:
    """Emit a full corpus: one normal segment plus one anomalous segment per
    fault, in the canonical directory layout, with labels and topology."""
    out_dir = Path(out_dir)
    if faults is None:
        faults = default_faults(model, anomaly_duration_s)
    by_service_type: dict[tuple[str, str], list[FaultSpec]] = {}
    for f in faults:
        key = (f.anomaly_type, f.target_service)
        for other in by_service_type.get(key, []):
            if f.start_ts <= other.end_ts and other.start_ts <= f.end_ts:
                raise ScenarioError(
                    f"overlapping faults on {f.target_service}: "
                    f"{f.anomaly_type}"
                )
        by_service_type.setdefault(key, []).append(f)

    normal_raw = generate_normal(model, normal_duration_s, seed_offset=0)
    write_corpus(out_dir / "normal", finalize(normal_raw))

    intervals: list[FaultInterval] = []
    for i, fault in enumerate(faults):
        seg = generate_normal(model, anomaly_duration_s, seed_offset=1 + i)
        rng = np.random.default_rng((model.seed, 1000 + i))
        intervals.append(inject(seg, fault, model, rng=rng))
        write_corpus(out_dir / "anomalous" / fault.anomaly_type, finalize(seg))
    write_labels(out_dir / "labels.csv", intervals)
    model.topology().to_json(out_dir / "topology.json")
    with open(out_dir / "scenario.json", "w", encoding="utf-8") as fh:
        json.dump({
            "model": model.to_dict(),
            "normal_duration_s": normal_duration_s,
            "anomaly_duration_s": anomaly_duration_s,
            "faults": [
                {
                    "anomaly_type": f.anomaly_type,
                    "target_service": f.target_service,
                    "start_ts": f.start_ts,
                    "end_ts": f.end_ts,
                    "strength": f.strength,
                }
                for f in faults
            ],
        }, fh, indent=2)
    return intervals

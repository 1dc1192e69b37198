"""Closed-form RDMA subsystem model with injected anomaly rules.

The model stands in for a two-host testbed.  Throughput is the minimum of the
line rate, an effective PCIe bound and the packet-rate bound.  Pause frames and
throughput collapses come only from *rules*: predicate regions over workload
features with a fixed symptom.  Diagnostic counters are smooth functions of the
workload so a counter-guided search has something to climb, and they jump by
``IN_REGION_GAIN`` inside any rule region.

Counter magnitudes are arbitrary units; only their relative shape matters.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .workload import (
    FeaturePredicate,
    Opcode,
    QpType,
    SearchSpace,
    ValidationError,
    WorkloadPoint,
    Direction,
    point_problems,
    region_matches,
)

IN_REGION_GAIN = 10.0
PERF_COUNTERS = ("tx_bps", "rx_bps", "tx_pps")
DIAG_COUNTERS = ("recv_wqe_cache_miss", "icm_cache_miss", "pcie_backpressure")
# a cache that is overrun costs at most this fraction of the packet rate
CACHE_PENALTY = 0.03


@dataclass(frozen=True)
class SubsystemSpec:
    name: str = "reference-200g"
    line_rate_bps: float = 200e9
    max_pps: float = 2e8
    pcie_bw_bps: float = 256e9
    pcie_wqe_fetch_cost_bytes: int = 16
    qp_cache_capacity: int = 256
    mr_cache_capacity: int = 4096
    recv_wqe_cache_capacity: int = 512
    num_pus: int = 8
    pipeline_stages: int = 16
    burst_size_bytes: int = 16 * 1024
    loopback_pcie_multiplier: float = 1.2
    cross_socket_latency_penalty: float = 1.1
    noise_stddev_fraction: float = 0.0

    def __post_init__(self):
        problems = []
        for name in ("line_rate_bps", "max_pps", "pcie_bw_bps"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be > 0")
        for name in ("pcie_wqe_fetch_cost_bytes", "qp_cache_capacity", "mr_cache_capacity",
                     "recv_wqe_cache_capacity"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("num_pus", "pipeline_stages", "burst_size_bytes"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("loopback_pcie_multiplier", "cross_socket_latency_penalty"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not 0 <= self.noise_stddev_fraction <= 0.05:
            problems.append("noise_stddev_fraction must lie in [0, 0.05]")
        if problems:
            raise ValidationError("invalid subsystem spec: " + "; ".join(problems))

    @property
    def request_vector_len(self) -> int:
        return self.num_pus * self.pipeline_stages

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SubsystemSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValidationError(f"unknown subsystem spec field(s): {sorted(unknown)}")
        kw = {}
        for key, value in data.items():
            if key == "name":
                kw[key] = str(value)
                continue
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValidationError(f"subsystem spec field {key!r} must be a number, got {value!r}")
            kw[key] = int(value) if known[key].type == "int" else float(value)
        return cls(**kw)


SYMPTOM_KINDS = ("pause_storm", "throughput_cap")


@dataclass(frozen=True)
class AnomalyRule:
    id: int
    region: tuple[FeaturePredicate, ...]
    symptom: str
    magnitude: float  # pause ratio for pause_storm, fraction of the binding bound for throughput_cap
    note: str = ""

    def __post_init__(self):
        if self.symptom not in SYMPTOM_KINDS:
            raise ValidationError(f"rule {self.id}: symptom must be one of {SYMPTOM_KINDS}")
        if self.symptom == "pause_storm" and not 0.001 < self.magnitude <= 1:
            raise ValidationError(f"rule {self.id}: pause_ratio must lie in (0.001, 1]")
        if self.symptom == "throughput_cap" and not 0 < self.magnitude < 0.8:
            raise ValidationError(f"rule {self.id}: fraction_of_bound must lie in (0, 0.8)")
        if not any(p.constrained for p in self.region):
            raise ValidationError(f"rule {self.id}: region constrains no feature")

    def matches(self, point: WorkloadPoint) -> bool:
        return region_matches(self.region, point)

    @property
    def constrained_features(self) -> tuple[str, ...]:
        return tuple(p.feature for p in self.region if p.constrained)

    def to_dict(self) -> dict:
        key = "pause_ratio" if self.symptom == "pause_storm" else "fraction_of_bound"
        d = {
            "id": self.id,
            "region": [p.to_dict() for p in self.region],
            "symptom": {"kind": self.symptom, key: self.magnitude},
        }
        if self.note:
            d["note"] = self.note
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "AnomalyRule":
        try:
            symptom = data["symptom"]
            kind = symptom["kind"]
            key = "pause_ratio" if kind == "pause_storm" else "fraction_of_bound"
            return cls(
                id=int(data["id"]),
                region=tuple(FeaturePredicate.from_dict(p) for p in data["region"]),
                symptom=kind,
                magnitude=float(symptom[key]),
                note=str(data.get("note", "")),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed anomaly rule {data.get('id', '?')!r}: missing {exc}") from exc


def load_rules(path: str | Path) -> list[AnomalyRule]:
    data = _load_json(path)
    entries = data.get("rules") if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: expected a list of rules or an object with a 'rules' list")
    rules = [AnomalyRule.from_dict(r) for r in entries]
    ids = [r.id for r in rules]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate rule ids")
    return rules


def save_rules(rules: Iterable[AnomalyRule], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"rules": [r.to_dict() for r in rules]}, indent=2) + "\n")


def load_spec(path: str | Path) -> SubsystemSpec:
    return SubsystemSpec.from_dict(_load_json(path))


def _load_json(path: str | Path) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


@dataclass(frozen=True)
class Measurement:
    achieved_bps: float
    achieved_pps: float
    pause_duration_ratio: float
    perf_counters: dict[str, float] = field(default_factory=dict)
    diag_counters: dict[str, float] = field(default_factory=dict)

    def counter(self, counter_id: str) -> float:
        if counter_id in self.perf_counters:
            return self.perf_counters[counter_id]
        return self.diag_counters[counter_id]

    def to_dict(self) -> dict:
        return {
            "achieved_bps": self.achieved_bps,
            "achieved_pps": self.achieved_pps,
            "pause_duration_ratio": self.pause_duration_ratio,
            "perf_counters": dict(sorted(self.perf_counters.items())),
            "diag_counters": dict(sorted(self.diag_counters.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Measurement":
        try:
            m = cls(
                achieved_bps=float(data["achieved_bps"]),
                achieved_pps=float(data["achieved_pps"]),
                pause_duration_ratio=float(data["pause_duration_ratio"]),
                perf_counters={str(k): float(v) for k, v in data.get("perf_counters", {}).items()},
                diag_counters={str(k): float(v) for k, v in data.get("diag_counters", {}).items()},
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"malformed measurement: {exc}") from exc
        if not 0 <= m.pause_duration_ratio <= 1:
            raise ValidationError("measurement pause_duration_ratio must lie in [0, 1]")
        if m.achieved_bps < 0 or m.achieved_pps < 0:
            raise ValidationError("measurement rates must be >= 0")
        if any(v < 0 for v in (*m.perf_counters.values(), *m.diag_counters.values())):
            raise ValidationError("measurement counters must be >= 0")
        return m


def mean_measurement(samples: list[Measurement]) -> Measurement:
    """Per-field arithmetic mean; counter maps are averaged key by key."""
    if not samples:
        raise ValueError("no samples to average")
    n = len(samples)

    def avg(values):
        return math.fsum(values) / n

    def avg_map(attr):
        keys = sorted({k for s in samples for k in getattr(s, attr)})
        return {k: avg(getattr(s, attr).get(k, 0.0) for s in samples) for k in keys}

    return Measurement(
        achieved_bps=avg(s.achieved_bps for s in samples),
        achieved_pps=avg(s.achieved_pps for s in samples),
        pause_duration_ratio=avg(s.pause_duration_ratio for s in samples),
        perf_counters=avg_map("perf_counters"),
        diag_counters=avg_map("diag_counters"),
    )


# -- throughput model ------------------------------------------------------------

def _packets(size: int, mtu: int) -> int:
    return max(1, -(-size // mtu))


def _cache_factor(demand: float, capacity: int) -> float:
    if demand <= capacity:
        return 1.0
    if capacity <= 0:
        return 1.0 - CACHE_PENALTY
    return 1.0 - CACHE_PENALTY * (1.0 - capacity / demand)


def _cross_path(point: WorkloadPoint, devices) -> bool:
    return any(devices[i].remote_path for i in (point.src_device, point.dst_device) if i < len(devices))


def pcie_effective_bps(point: WorkloadPoint, spec: SubsystemSpec, devices=None) -> float:
    payload = sum(point.message_pattern)
    overhead = point.wqe_count * spec.pcie_wqe_fetch_cost_bytes
    eff = spec.pcie_bw_bps * payload / (payload + overhead)
    if point.loopback:
        eff /= spec.loopback_pcie_multiplier
    if devices is not None and _cross_path(point, devices):
        eff /= spec.cross_socket_latency_penalty
    return eff


def mean_packet_bytes(point: WorkloadPoint) -> float:
    packets = sum(_packets(s, point.mtu_bytes) for s in point.message_pattern)
    return sum(point.message_pattern) / packets


def baseline_throughput(point: WorkloadPoint, spec: SubsystemSpec, devices=None) -> tuple[float, float]:
    """(bps, pps) of a rule-free subsystem.

    ``devices`` is the memory-device list of the search space; when given,
    endpoints on a non-affine device pay the cross-socket penalty on PCIe.
    """
    mean_pkt = mean_packet_bytes(point)
    cache = (
        _cache_factor(point.qp_count, spec.qp_cache_capacity)
        * _cache_factor(point.mr_count, spec.mr_cache_capacity)
        * _cache_factor(point.wq_depth * point.wqe_count, spec.recv_wqe_cache_capacity)
    )
    pps_limit = spec.max_pps * cache
    bps = min(spec.line_rate_bps, pcie_effective_bps(point, spec, devices), pps_limit * mean_pkt * 8)
    pps = min(bps / (8 * mean_pkt), spec.max_pps)
    return bps, pps


# -- diagnostic counters ------------------------------------------------------------

_ICM_OP_FACTOR = {
    (QpType.RC, Opcode.WRITE): 1.0,
    (QpType.RC, Opcode.READ): 0.8,
    (QpType.UC, Opcode.WRITE): 0.7,
    (QpType.RC, Opcode.SEND_RECV): 0.5,
    (QpType.UC, Opcode.SEND_RECV): 0.4,
    (QpType.UD, Opcode.SEND_RECV): 0.2,
}
_RECV_TYPE_FACTOR = {QpType.UD: 3.0, QpType.UC: 1.4, QpType.RC: 1.0}


def diagnostic_counters(point: WorkloadPoint, spec: SubsystemSpec, devices=None) -> dict[str, float]:
    nw = point.wqe_count
    sizes = point.message_pattern
    two_sided = 1.0 if point.opcode is Opcode.SEND_RECV else 0.05
    # receive WQEs the NIC has to prefetch per posting round
    recv_demand = point.wq_depth * nw / max(spec.recv_wqe_cache_capacity, 1)
    recv = 1000.0 * two_sided * _RECV_TYPE_FACTOR[point.qp_type] * math.sqrt(recv_demand)

    # long requests hide miss latency behind the pipeline; averaged per request
    intensity = sum(1024.0 / (s + 1024.0) for s in sizes) / len(sizes)
    batch = 1.0 / (1.0 + 0.5 * math.log2(nw))
    icm = (
        1000.0
        * _ICM_OP_FACTOR[(point.qp_type, point.opcode)]
        * (math.sqrt(point.qp_count / max(spec.qp_cache_capacity, 1))
           + math.sqrt(point.mr_count / max(spec.mr_cache_capacity, 1)))
        * intensity
        * batch
    )

    cross = 1.0 if devices is not None and _cross_path(point, devices) else 0.0
    bidir = point.direction is Direction.BIDIRECTIONAL
    # DMA ordering stalls need traffic in both directions mixing short and long requests
    spread = math.log2(max(sizes) / min(sizes)) / 16.0 if bidir else 0.0
    read_term = 0.0
    if point.opcode is Opcode.READ:
        # responses to short reads hold up the read pipeline; the shortest request weighs most
        mean_log = sum(math.log2(max(s, 64) / 64) for s in sizes) / len(sizes)
        min_log = math.log2(max(min(sizes), 64) / 64)
        read_term = (4096 / point.mtu_bytes) * (mean_log + min_log) / 16.0
    backpressure = (
        1000.0
        * (1.0 + 1.5 * point.loopback)
        * (1.0 + 0.8 * cross)
        * (1.0 + bidir)
        * (1.0 + 0.25 * (point.sge_per_wqe - 1))
        * (1.0 + spread)
        * (1.0 + read_term)
    )
    return {"recv_wqe_cache_miss": recv, "icm_cache_miss": icm, "pcie_backpressure": backpressure}


# -- simulate -------------------------------------------------------------------------

def dominant_rule(point: WorkloadPoint, rules: Iterable[AnomalyRule]) -> AnomalyRule | None:
    """The matching rule with the worst symptom: max pause first, then min throughput cap."""
    matching = [r for r in rules if r.matches(point)]
    if not matching:
        return None
    pauses = [r for r in matching if r.symptom == "pause_storm"]
    if pauses:
        return max(pauses, key=lambda r: (r.magnitude, -r.id))
    return min(matching, key=lambda r: (r.magnitude, r.id))


def simulate(
    point: WorkloadPoint,
    spec: SubsystemSpec,
    rules: Iterable[AnomalyRule] = (),
    seed=None,
    space: SearchSpace | None = None,
) -> Measurement:
    """Evaluate one workload point; pure given its arguments.

    Points are validated against ``space`` (or against the space implied by
    ``spec`` when none is given).
    """
    space = space if space is not None else SearchSpace(request_vector_len_n=spec.request_vector_len)
    problems = point_problems(point, space)
    if problems:
        raise ValidationError("invalid workload point: " + "; ".join(problems))
    devices = space.memory_devices
    bps, pps = baseline_throughput(point, spec, devices)
    pause = 0.0
    rules = tuple(rules)
    rule = dominant_rule(point, rules)
    if rule is not None:
        if rule.symptom == "pause_storm":
            pause = rule.magnitude
            bps *= 1.0 - pause
            pps *= 1.0 - pause
        else:
            utilization = max(bps / spec.line_rate_bps, pps / spec.max_pps)
            scale = min(1.0, rule.magnitude / utilization)
            bps *= scale
            pps *= scale

    diag = diagnostic_counters(point, spec, devices)
    if rule is not None:
        diag = {k: v * IN_REGION_GAIN for k, v in diag.items()}

    if spec.noise_stddev_fraction > 0:
        rng = np.random.default_rng(seed)
        jitter = rng.normal(1.0, spec.noise_stddev_fraction, size=3 + len(diag))
        jitter = np.clip(jitter, 0.0, None)
        bps = min(bps * jitter[0], spec.line_rate_bps)
        pps = min(pps * jitter[1], spec.max_pps)
        if pause > 0:
            pause = float(min(max(pause * jitter[2], 0.0), 1.0))
        diag = {k: float(v * j) for (k, v), j in zip(diag.items(), jitter[3:])}

    bps, pps = float(bps), float(pps)
    # the peer mirrors the traffic, so the receive side sees the same rate
    perf = {"tx_bps": bps, "rx_bps": bps, "tx_pps": pps}
    return Measurement(bps, pps, float(pause), perf, diag)


@dataclass
class SimulatorTester:
    """Callable tester backed by the simulator: ``tester(point, seed) -> Measurement``."""

    spec: SubsystemSpec
    rules: tuple[AnomalyRule, ...] = ()
    space: SearchSpace | None = None
    call_log: list[WorkloadPoint] | None = None

    def __call__(self, point: WorkloadPoint, seed=None) -> Measurement:
        if self.call_log is not None:
            self.call_log.append(point)
        return simulate(point, self.spec, self.rules, seed=seed, space=self.space)

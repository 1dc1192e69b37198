"""Anomaly detection on measurements and minimal-feature-set extraction."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .simulator import Measurement, SubsystemSpec, mean_measurement
from .workload import (
    FEATURES,
    FeaturePredicate,
    Mfs,
    SearchSpace,
    ValidationError,
    WorkloadPoint,
    feature_grid,
    matches_mfs,
    set_feature,
)

log = logging.getLogger(__name__)

PAUSE_ANOMALY = "pause-anomaly"
THROUGHPUT_ANOMALY = "throughput-anomaly"

Tester = Callable[[WorkloadPoint, object], Measurement]


class TesterError(RuntimeError):
    """The tester could not produce a measurement; searches stop and keep what they found."""


class UnstableAnomalyError(RuntimeError):
    """The discovery point stopped reproducing its anomaly when measured again."""


@dataclass(frozen=True)
class DetectionPolicy:
    pause_ratio_threshold: float = 0.001
    throughput_shortfall_fraction: float = 0.20
    samples_per_iteration: int = 4
    # relative severity band inside which an ablated point counts as the same anomaly
    symptom_match_tolerance: float = 0.1

    def __post_init__(self):
        if not 0 < self.pause_ratio_threshold < 1:
            raise ValidationError("pause_ratio_threshold must lie in (0, 1)")
        if not 0 < self.throughput_shortfall_fraction < 1:
            raise ValidationError("throughput_shortfall_fraction must lie in (0, 1)")
        if self.samples_per_iteration < 1:
            raise ValidationError("samples_per_iteration must be >= 1")
        if self.symptom_match_tolerance < 0:
            raise ValidationError("symptom_match_tolerance must be >= 0")


def sample_seeds(seed, n: int) -> list:
    if seed is None:
        return [None] * n
    ss = np.random.SeedSequence(seed if not isinstance(seed, np.random.Generator) else seed.integers(2**63))
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def measure_stable(point: WorkloadPoint, tester: Tester, policy: DetectionPolicy, seed=None) -> Measurement:
    """Average ``samples_per_iteration`` tester runs of one point."""
    samples = [tester(point, s) for s in sample_seeds(seed, policy.samples_per_iteration)]
    return mean_measurement(samples)


def detect(m: Measurement, spec: SubsystemSpec, policy: DetectionPolicy) -> str | None:
    if m.pause_duration_ratio > policy.pause_ratio_threshold:
        return PAUSE_ANOMALY
    keep = 1.0 - policy.throughput_shortfall_fraction
    if m.achieved_bps < keep * spec.line_rate_bps and m.achieved_pps < keep * spec.max_pps:
        return THROUGHPUT_ANOMALY
    return None


def severity(m: Measurement, kind: str | None, spec: SubsystemSpec) -> float:
    """Pause ratio for pause anomalies, utilization of the binding bound otherwise."""
    if kind == PAUSE_ANOMALY:
        return m.pause_duration_ratio
    return max(m.achieved_bps / spec.line_rate_bps, m.achieved_pps / spec.max_pps)


@dataclass
class AnomalyRecord:
    mfs: Mfs | None
    discovery_point: WorkloadPoint
    symptom: str
    measurement: Measurement
    discovery_eval: int
    objective: str = ""
    mfs_evals: int = 0
    unstable: bool = False

    def to_dict(self) -> dict:
        return {
            "anomaly_id": self.mfs.anomaly_id if self.mfs else None,
            "symptom": self.symptom,
            "discovery_eval": self.discovery_eval,
            "objective": self.objective,
            "mfs_evals": self.mfs_evals,
            "unstable": self.unstable,
            "mfs": self.mfs.to_dict() if self.mfs else None,
            "discovery_point": self.discovery_point.to_dict(),
            "measurement": self.measurement.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnomalyRecord":
        try:
            return cls(
                mfs=Mfs.from_dict(data["mfs"]) if data.get("mfs") else None,
                discovery_point=WorkloadPoint.from_dict(data["discovery_point"]),
                symptom=data["symptom"],
                measurement=Measurement.from_dict(data["measurement"]),
                discovery_eval=int(data["discovery_eval"]),
                objective=data.get("objective", ""),
                mfs_evals=int(data.get("mfs_evals", 0)),
                unstable=bool(data.get("unstable", False)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed anomaly record: missing {exc}") from exc


@dataclass
class EvalMeter:
    """Counts stable measurements against an optional cap."""

    limit: int | None = None
    used: int = 0

    @property
    def exhausted(self) -> bool:
        return self.limit is not None and self.used >= self.limit

    def take(self) -> bool:
        if self.exhausted:
            return False
        self.used += 1
        return True


def _run_region(values: Sequence, flags: Sequence[bool], current) -> FeaturePredicate | tuple:
    """Maximal contiguous anomalous run around ``current`` as (kind, low, high)."""
    i = values.index(current)
    lo = hi = i
    while lo > 0 and flags[lo - 1]:
        lo -= 1
    while hi < len(values) - 1 and flags[hi + 1]:
        hi += 1
    at_bottom, at_top = lo == 0, hi == len(values) - 1
    if at_bottom and at_top:
        return ("any", None, None)
    if at_top:
        return ("at_least", values[lo], None)
    if at_bottom:
        return ("at_most", values[hi], None)
    return ("in_region", values[lo], values[hi])


def _drop_implied(preds: dict[str, FeaturePredicate]) -> None:
    """Remove message-size bounds that follow from the other extreme (min <= max)."""
    lo, hi = preds["msg_size_min"], preds["msg_size_max"]
    if lo.kind == "at_least" and hi.kind == "at_least" and hi.value <= lo.value:
        preds["msg_size_max"] = FeaturePredicate("msg_size_max")
    elif hi.kind == "at_most" and lo.kind == "at_most" and lo.value >= hi.value:
        preds["msg_size_min"] = FeaturePredicate("msg_size_min")


def badness(m: Measurement, spec: SubsystemSpec, policy: DetectionPolicy) -> tuple[str | None, float]:
    """Symptom kind and a scalar that orders symptoms: pause > throughput collapse > clean."""
    kind = detect(m, spec, policy)
    if kind == PAUSE_ANOMALY:
        return kind, 1.0 + m.pause_duration_ratio
    if kind == THROUGHPUT_ANOMALY:
        return kind, 1.0 - severity(m, kind, spec)
    return None, 0.0


SAME, CLEARED, MASKED = "same", "cleared", "masked"


def construct_mfs(
    point: WorkloadPoint,
    tester: Tester,
    space: SearchSpace,
    policy: DetectionPolicy,
    spec: SubsystemSpec,
    anomaly_id: int = 0,
    known: Iterable[Mfs] = (),
    seed=None,
    meter: EvalMeter | None = None,
    on_eval: Callable[[WorkloadPoint, Measurement], None] | None = None,
) -> Mfs:
    """One-factor-at-a-time ablation around a discovery point.

    Each ablated point is classified against the discovery measurement:

    * same: same symptom kind, severity within ``symptom_match_tolerance``
    * cleared: clean, or a milder symptom (the original would still show if present)
    * masked: a more severe symptom, which may hide the original; the value is
      left out of the region like an invalid one

    Alternatives inside an already known MFS are never sent to the tester and
    count as masked.  When the meter runs dry the remaining alternatives count
    as cleared, which can only narrow the result.
    """
    meter = meter if meter is not None else EvalMeter()
    known = tuple(known)

    def measure(p):
        m = measure_stable(p, tester, policy, seed)
        if on_eval is not None:
            on_eval(p, m)
        return m

    if not meter.take():
        raise UnstableAnomalyError("no evaluations left to confirm the discovery point")
    m0 = measure(point)
    kind0, bad0 = badness(m0, spec, policy)
    if kind0 is None:
        raise UnstableAnomalyError("discovery point no longer reproduces its anomaly")
    sev0 = severity(m0, kind0, spec)
    tol = policy.symptom_match_tolerance

    def classify(p) -> str:
        if matches_mfs(p, known) is not None:
            return MASKED
        if not meter.take():
            return CLEARED
        m = measure(p)
        kind, bad = badness(m, spec, policy)
        if kind == kind0 and abs(severity(m, kind, spec) - sev0) <= tol * sev0:
            return SAME
        return MASKED if bad > bad0 else CLEARED

    preds: dict[str, FeaturePredicate] = {}
    for feat in FEATURES:
        current = feat.get(point)
        grid = feature_grid(feat.id, space)
        values, flags = [], []
        for v in sorted(set(grid) | {current}) if feat.numeric else list(grid):
            if v == current:
                values.append(v)
                flags.append(True)
                continue
            alt = set_feature(point, feat.id, v, space)
            if alt is None:
                continue
            verdict = classify(alt)
            if verdict != MASKED:
                values.append(v)
                flags.append(verdict == SAME)
        if feat.numeric:
            kind, lo, hi = _run_region(values, flags, current)
            preds[feat.id] = FeaturePredicate(feat.id, kind, lo, hi)
        elif all(flags):
            preds[feat.id] = FeaturePredicate(feat.id)
        else:
            preds[feat.id] = FeaturePredicate(feat.id, "equals", current)
    _drop_implied(preds)
    log.debug("mfs %d built with %d evaluations", anomaly_id, meter.used)
    return Mfs(anomaly_id, tuple(preds.values()), kind0, sev0)

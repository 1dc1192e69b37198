"""Counter-guided simulated annealing, the random baseline, and the campaign driver.

Budget accounting: one *evaluation* is one stable measurement (the average of
``samples_per_iteration`` tester calls).  Search evaluations draw from
``SaConfig.eval_budget``; evaluations spent building an MFS are metered
separately and capped per anomaly by ``SaConfig.mfs_eval_cap``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .monitor import (
    AnomalyRecord,
    DetectionPolicy,
    EvalMeter,
    Tester,
    TesterError,
    UnstableAnomalyError,
    construct_mfs,
    detect,
    measure_stable,
)
from .simulator import DIAG_COUNTERS, PERF_COUNTERS, Measurement, SubsystemSpec
from .workload import Mfs, SearchSpace, ValidationError, WorkloadPoint, matches_mfs, mutate, sample_random

log = logging.getLogger(__name__)

EPSILON = 1.0
PERFORMANCE = "performance"
DIAGNOSTIC = "diagnostic"
ALL_COUNTERS = PERF_COUNTERS + DIAG_COUNTERS
# counter logged for evaluations that are not steering towards any objective
UNGUIDED_COUNTER = "tx_bps"
MAX_CONSECUTIVE_SKIPS = 10_000


@dataclass(frozen=True)
class SaConfig:
    t0: float = 1.0
    t_min: float = 0.01
    alpha: float = 0.9
    n_per_temperature: int = 20
    eval_budget: int = 2000
    seed: int = 0
    p_local: float = 0.8
    mfs_eval_cap: int = 500
    initial_random_points: int = 10

    def __post_init__(self):
        problems = []
        if not self.t_min > 0:
            problems.append("t_min must be > 0")
        if not 0 < self.alpha < 1:
            problems.append("alpha must lie in (0, 1)")
        if self.n_per_temperature < 1:
            problems.append("n_per_temperature must be >= 1")
        if self.eval_budget < 0:
            problems.append("eval_budget must be >= 0")
        if not 0 <= self.p_local <= 1:
            problems.append("p_local must lie in [0, 1]")
        if self.mfs_eval_cap < 1:
            problems.append("mfs_eval_cap must be >= 1")
        if self.initial_random_points < 0:
            problems.append("initial_random_points must be >= 0")
        if problems:
            raise ValidationError("invalid SA config: " + "; ".join(problems))

    def temperatures(self) -> list[float]:
        """Outer-loop temperature schedule T_k = t0 * alpha**k while T > t_min."""
        out, k = [], 0
        while self.t0 * self.alpha**k > self.t_min:
            out.append(self.t0 * self.alpha**k)
            k += 1
        return out


@dataclass(frozen=True)
class CounterObjective:
    counter_id: str
    kind: str = DIAGNOSTIC

    def __post_init__(self):
        if self.kind not in (PERFORMANCE, DIAGNOSTIC):
            raise ValidationError(f"objective kind must be {PERFORMANCE!r} or {DIAGNOSTIC!r}")

    @classmethod
    def for_counter(cls, counter_id: str) -> "CounterObjective":
        return cls(counter_id, PERFORMANCE if counter_id in PERF_COUNTERS else DIAGNOSTIC)


def delta_energy_flagged(old: float, new: float, kind: str) -> tuple[float, bool]:
    """Energy change and whether the epsilon denominator was substituted."""
    denom = old if kind == PERFORMANCE else new
    flagged = denom == 0
    if flagged:
        denom = EPSILON
    diff = (new - old) if kind == PERFORMANCE else (old - new)
    return diff / denom, flagged


def delta_energy(old: float, new: float, kind: str) -> float:
    """Relative change of a counter; negative means the move is an improvement.

    Performance counters are minimized, ``(B - A) / A``; diagnostic counters are
    maximized, ``(A - B) / B``.
    """
    return delta_energy_flagged(old, new, kind)[0]


def accept(de: float, temperature: float, rng: np.random.Generator) -> bool:
    if de < 0:
        return True
    return bool(rng.random() < math.exp(-de / temperature))


def rank_counters(samples: Sequence[Measurement], counters: Iterable[str] | None = None) -> list[CounterObjective]:
    """Counters by decreasing coefficient of variation (population std / mean).

    Zero-mean counters go last; ties break on counter id.
    """
    if len(samples) < 2:
        raise ValueError("ranking counters needs at least two samples")
    if counters is None:
        counters = sorted({k for m in samples for k in (*m.perf_counters, *m.diag_counters)})
    scored = []
    for cid in counters:
        values = np.array([m.counter(cid) for m in samples], dtype=float)
        mean = float(values.mean())
        if mean == 0:
            scored.append((1, 0.0, cid))
        else:
            scored.append((0, -float(values.std()) / mean, cid))
    scored.sort()
    return [CounterObjective.for_counter(cid) for _, _, cid in scored]


def coefficient_of_variation(samples: Sequence[Measurement], counter_id: str) -> float:
    values = np.array([m.counter(counter_id) for m in samples], dtype=float)
    mean = values.mean()
    return 0.0 if mean == 0 else float(values.std() / mean)


@dataclass
class Monitor:
    """Detection policy bound to the bounds of one subsystem."""

    spec: SubsystemSpec
    policy: DetectionPolicy = field(default_factory=DetectionPolicy)

    def detect(self, m: Measurement) -> str | None:
        return detect(m, self.spec, self.policy)


@dataclass(frozen=True)
class TrajectoryRow:
    eval_index: int
    counter_id: str
    value: float
    event: str = "none"


class BudgetExhausted(Exception):
    pass


@dataclass
class SearchResult:
    records: list[AnomalyRecord]
    known: list[Mfs]
    evals: int
    mfs_evals: int
    tester_calls: int
    skips: int
    trajectory: list[TrajectoryRow]
    budget_exhausted: bool
    zero_denominator_steps: int = 0
    ranking: list[tuple[str, float]] = field(default_factory=list)
    error: str | None = None


class Session:
    """Mutable state shared by every search run in one campaign."""

    def __init__(self, config: SaConfig, space: SearchSpace, tester: Tester, monitor: Monitor,
                 anomalies_in: Iterable[Mfs] = ()):
        self.config = config
        self.space = space
        self.tester = tester
        self.monitor = monitor
        self.rng = np.random.default_rng(config.seed)
        self.known: list[Mfs] = list(anomalies_in)
        self.records: list[AnomalyRecord] = []
        self.evals = 0
        self.mfs_evals = 0
        self.tester_calls = 0
        self.skips = 0
        self.zero_denominator_steps = 0
        self.trajectory: list[TrajectoryRow] = []
        self.limit = config.eval_budget
        self.error: str | None = None

    @property
    def remaining(self) -> int:
        return max(0, min(self.limit, self.config.eval_budget) - self.evals)

    def _measure(self, point: WorkloadPoint) -> Measurement:
        seed = int(self.rng.integers(2**63))
        m = measure_stable(point, self.tester, self.monitor.policy, seed)
        self.tester_calls += self.monitor.policy.samples_per_iteration
        return m

    def _log(self, counter_id: str, m: Measurement, event: str = "none") -> None:
        self.trajectory.append(TrajectoryRow(len(self.trajectory), counter_id, m.counter(counter_id), event))

    def next_anomaly_id(self) -> int:
        return max((m.anomaly_id for m in self.known), default=0) + 1

    def evaluate(self, point: WorkloadPoint, counter_id: str = UNGUIDED_COUNTER) -> tuple[Measurement, AnomalyRecord | None]:
        """Spend one budget evaluation on ``point`` and handle any anomaly it shows."""
        if self.remaining <= 0:
            raise BudgetExhausted
        m = self._measure(point)
        self.evals += 1
        kind = self.monitor.detect(m)
        self._log(counter_id, m, "anomaly-found" if kind else "none")
        if kind is None:
            return m, None
        return m, self._extract(point, m, kind, counter_id)

    def _extract(self, point, m, kind, counter_id) -> AnomalyRecord:
        meter = EvalMeter(self.config.mfs_eval_cap)
        seed = int(self.rng.integers(2**63))

        def on_eval(p, mm):
            self.tester_calls += self.monitor.policy.samples_per_iteration
            self._log(counter_id, mm, "mfs-extraction")

        anomaly_id = self.next_anomaly_id()
        try:
            mfs = construct_mfs(point, self.tester, self.space, self.monitor.policy, self.monitor.spec,
                                anomaly_id=anomaly_id, known=self.known, seed=seed, meter=meter,
                                on_eval=on_eval)
        except UnstableAnomalyError as exc:
            log.info("unstable anomaly at evaluation %d: %s", self.evals, exc)
            rec = AnomalyRecord(None, point, kind, m, self.evals, counter_id, meter.used, unstable=True)
        else:
            self.known.append(mfs)
            rec = AnomalyRecord(mfs, point, kind, m, self.evals, counter_id, meter.used)
            log.info("anomaly %d (%s) found at evaluation %d, mfs with %d constrained features",
                     anomaly_id, kind, self.evals, len(mfs.constrained))
        self.mfs_evals += meter.used
        self.records.append(rec)
        return rec

    def random_unknown_point(self) -> WorkloadPoint | None:
        for _ in range(MAX_CONSECUTIVE_SKIPS):
            p = sample_random(self.space, self.rng)
            if matches_mfs(p, self.known) is None:
                return p
            self.skips += 1
        return None

    def result(self) -> SearchResult:
        return SearchResult(
            records=list(self.records),
            known=list(self.known),
            evals=self.evals,
            mfs_evals=self.mfs_evals,
            tester_calls=self.tester_calls,
            skips=self.skips,
            trajectory=list(self.trajectory),
            budget_exhausted=self.evals >= self.config.eval_budget,
            zero_denominator_steps=self.zero_denominator_steps,
            error=self.error,
        )

    def guarded(self, fn: Callable[[], None]) -> None:
        """Run ``fn``; a tester failure ends the search but keeps the partial results."""
        try:
            fn()
        except TesterError as exc:
            self.error = f"tester failed at evaluation {self.evals + 1}: {exc}"
            log.error("%s", self.error)


def _fresh_start(session: Session, counter_id: str) -> tuple[WorkloadPoint, Measurement] | None:
    """Random (re)start: evaluate random points until one is not anomalous."""
    while True:
        p = session.random_unknown_point()
        if p is None:
            return None
        m, rec = session.evaluate(p, counter_id)
        if rec is None:
            return p, m


def run_sa(session: Session, objective: CounterObjective, temperature: float | None = None) -> None:
    """Anneal ``objective`` inside an existing session until T <= t_min or the budget is spent.

    ``temperature`` starts the schedule somewhere other than ``t0``, e.g. to resume a run.
    """
    cfg = session.config
    t = cfg.t0 if temperature is None else temperature
    if t <= cfg.t_min:
        return
    cid = objective.counter_id
    try:
        start = _fresh_start(session, cid)
        if start is None:
            return
        p_old, m_old = start
        while t > cfg.t_min:
            for _ in range(cfg.n_per_temperature):
                p_new = mutate(p_old, session.space, session.rng, cfg.p_local)
                if matches_mfs(p_new, session.known) is not None:
                    session.skips += 1
                    continue
                m_new, rec = session.evaluate(p_new, cid)
                if rec is not None:
                    start = _fresh_start(session, cid)
                    if start is None:
                        return
                    p_old, m_old = start
                    continue
                de, flagged = delta_energy_flagged(m_old.counter(cid), m_new.counter(cid), objective.kind)
                session.zero_denominator_steps += flagged
                if flagged:
                    log.debug("zero energy denominator for %s at evaluation %d", cid, session.evals)
                if accept(de, t, session.rng):
                    p_old, m_old = p_new, m_new
            t *= cfg.alpha
    except BudgetExhausted:
        pass


def search_sa(
    objective: CounterObjective,
    config: SaConfig,
    space: SearchSpace,
    tester: Tester,
    monitor: Monitor,
    anomalies_in: Iterable[Mfs] = (),
    temperature: float | None = None,
) -> SearchResult:
    session = Session(config, space, tester, monitor, anomalies_in)
    session.guarded(lambda: run_sa(session, objective, temperature))
    return session.result()


def run_random(session: Session) -> None:
    try:
        while session.remaining > 0:
            p = session.random_unknown_point()
            if p is None:
                return
            session.evaluate(p)
    except BudgetExhausted:
        pass


def search_random(
    config: SaConfig,
    space: SearchSpace,
    tester: Tester,
    monitor: Monitor,
    anomalies_in: Iterable[Mfs] = (),
) -> SearchResult:
    session = Session(config, space, tester, monitor, anomalies_in)
    session.guarded(lambda: run_random(session))
    return session.result()


def run_campaign(
    config: SaConfig,
    space: SearchSpace,
    tester: Tester,
    monitor: Monitor,
    counters: Sequence[str] = DIAG_COUNTERS,
    anomalies_in: Iterable[Mfs] = (),
) -> SearchResult:
    """Rank counters on a few random points, then anneal each in rank order.

    The counters share one anomaly set and one evaluation budget.  Each anneal
    gets an even share of what is left when it starts, so budget an anneal
    does not use (it reached ``t_min`` early) flows to the counters after it;
    passes repeat while budget remains.
    """
    session = Session(config, space, tester, monitor, anomalies_in)
    scores: list[tuple[str, float]] = []

    session.guarded(lambda: _campaign(session, counters, scores))
    result = session.result()
    result.ranking = scores
    return result


def _campaign(session: Session, counters: Sequence[str], scores: list[tuple[str, float]]) -> None:
    config = session.config
    samples = []
    try:
        for _ in range(config.initial_random_points):
            p = session.random_unknown_point()
            if p is None:
                break
            m, _ = session.evaluate(p)
            samples.append(m)
    except BudgetExhausted:
        pass

    if not counters:
        run_random(session)
        return

    ranking = rank_counters(samples, counters) if len(samples) >= 2 else [
        CounterObjective.for_counter(c) for c in sorted(counters)]
    scores.extend((o.counter_id, coefficient_of_variation(samples, o.counter_id) if samples else 0.0) for o in ranking)
    log.info("counter ranking: %s", ", ".join(f"{c}={v:.3f}" for c, v in scores))

    while session.remaining > 0:
        before = session.evals
        for i, objective in enumerate(ranking):
            left = session.remaining
            if left <= 0:
                break
            session.limit = session.evals + max(1, left // (len(ranking) - i))
            run_sa(session, objective)
            session.limit = config.eval_budget
        if session.evals == before:
            break  # nothing left to evaluate outside the known anomalies

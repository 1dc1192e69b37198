import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import isolated_point
from rdma_forge import data_path
from rdma_forge.monitor import (
    AnomalyRecord,
    DetectionPolicy,
    EvalMeter,
    UnstableAnomalyError,
    construct_mfs,
    detect,
    measure_stable,
)
from rdma_forge.simulator import AnomalyRule, Measurement, SimulatorTester, simulate
from rdma_forge.workload import (
    FEATURES,
    FeaturePredicate,
    Mfs,
    ValidationError,
    WorkloadPoint,
    feature_grid,
    full_predicates,
    sample_random,
    set_feature,
)


def meas(bps, pps, pause=0.0):
    return Measurement(bps, pps, pause, {"tx_bps": bps}, {"icm_cache_miss": 1.0})


def pause_point():
    return WorkloadPoint.from_dict(json.loads(data_path("ud_send_pause_point.json").read_text()))


def test_pause_above_threshold_is_flagged(spec, policy):
    assert detect(meas(spec.line_rate_bps, spec.max_pps, 0.002), spec, policy) == "pause-anomaly"


def test_both_bounds_missed_is_throughput_anomaly(spec, policy):
    m = meas(0.75 * spec.line_rate_bps, 0.75 * spec.max_pps)
    assert detect(m, spec, policy) == "throughput-anomaly"


def test_one_bound_met_is_clean(spec, policy):
    assert detect(meas(0.1 * spec.line_rate_bps, spec.max_pps), spec, policy) is None
    assert detect(meas(spec.line_rate_bps, 0.1 * spec.max_pps), spec, policy) is None


def test_detection_boundaries_are_exact(spec, policy):
    line, mpps = spec.line_rate_bps, spec.max_pps
    assert detect(meas(line, mpps, 0.001), spec, policy) is None
    assert detect(meas(line, mpps, 0.001 + 1e-6), spec, policy) == "pause-anomaly"
    assert detect(meas(0.8 * line, 0.8 * mpps), spec, policy) is None
    assert detect(meas(np.nextafter(0.8 * line, 0), np.nextafter(0.8 * mpps, 0)), spec, policy) == \
        "throughput-anomaly"


def test_policy_invariants():
    with pytest.raises(ValidationError):
        DetectionPolicy(pause_ratio_threshold=0)
    with pytest.raises(ValidationError):
        DetectionPolicy(samples_per_iteration=0)


def test_measure_stable_averages_samples(spec):
    ratios = iter([0.10, 0.20, 0.20, 0.30])

    def tester(point, seed):
        return meas(1.0, 1.0, next(ratios))

    m = measure_stable(None, tester, DetectionPolicy(), seed=0)
    assert m.pause_duration_ratio == pytest.approx(0.20)


def test_measure_stable_without_noise_equals_one_sample(spec, rules, space, policy):
    p = pause_point()
    assert measure_stable(p, SimulatorTester(spec, rules, space), policy, 3) == simulate(p, spec, rules)


def test_measure_stable_is_deterministic(spec, rules, space, policy):
    noisy = replace(spec, noise_stddev_fraction=0.02)
    t = SimulatorTester(noisy, rules, space)
    p = pause_point()
    assert measure_stable(p, t, policy, 9) == measure_stable(p, t, policy, 9)
    assert measure_stable(p, t, policy, 9) != measure_stable(p, t, policy, 10)


def test_mfs_for_rule_one_ignores_incidental_qp_count(spec, rules, space, policy, rule_by_id):
    p = replace(pause_point(), qp_count=16)
    mfs = construct_mfs(p, SimulatorTester(spec, rules, space), space, policy, spec, anomaly_id=1)
    constrained = {pr.feature: pr for pr in mfs.constrained}
    assert constrained == {
        "transport": FeaturePredicate("transport", "equals", "UD SEND_RECV"),
        "wqe_count": FeaturePredicate("wqe_count", "at_least", 64),
        "wq_depth": FeaturePredicate("wq_depth", "at_least", 256),
    }
    assert mfs.predicate("qp_count").kind == "any"
    assert mfs.matches(p)


def test_single_feature_rule_gives_one_predicate(spec, space, policy):
    rule = AnomalyRule(1, (FeaturePredicate("mtu_bytes", "at_most", 1024),), "pause_storm", 0.3)
    p = set_feature(sample_random(space, 0), "mtu_bytes", 1024, space)
    mfs = construct_mfs(p, SimulatorTester(spec, (rule,), space), space, policy, spec)
    assert [pr.feature for pr in mfs.constrained] == ["mtu_bytes"]


def _flagged(point, spec, rules, policy):
    return detect(simulate(point, spec, rules), spec, policy) is not None


@pytest.mark.parametrize("rule_id", [1, 3, 7, 9, 13, 15])
def test_mfs_is_minimal_and_sound(rule_id, spec, rules, space, policy, rule_by_id):
    rng = np.random.default_rng(rule_id)
    p = isolated_point(rule_by_id[rule_id], rules, space, rng)
    tester = SimulatorTester(spec, rules, space)
    mfs = construct_mfs(p, tester, space, policy, spec, anomaly_id=rule_id)
    assert mfs.matches(p)
    # minimality: dropping any predicate admits an unflagged point
    for pred in mfs.constrained:
        witnesses = [q for v in feature_grid(pred.feature, space) if not pred.holds(v)
                     for q in [set_feature(p, pred.feature, v, space)] if q is not None]
        assert any(not _flagged(q, spec, rules, policy) for q in witnesses), pred
    # soundness: sampled points matching the mfs are flagged
    matched = 0
    for _ in range(20_000):
        q = sample_random(space, rng)
        for pred in mfs.constrained:
            if q is None or pred.matches(q):
                continue
            q = set_feature(q, pred.feature, pred.allowed(feature_grid(pred.feature, space))[0], space)
        if q is None or not mfs.matches(q):
            continue
        assert _flagged(q, spec, rules, policy)
        matched += 1
        if matched == 1000:
            break
    assert matched > 0


def test_mfs_cost_is_sum_of_grid_sizes(spec, rules, space, policy):
    calls = []
    tester = SimulatorTester(spec, rules, space, call_log=calls)
    construct_mfs(pause_point(), tester, space, policy, spec)
    bound = 1 + sum(len(feature_grid(f.id, space)) for f in FEATURES)
    assert len(calls) <= bound * policy.samples_per_iteration


def test_mfs_meter_caps_evaluations(spec, rules, space, policy):
    meter = EvalMeter(limit=5)
    construct_mfs(pause_point(), SimulatorTester(spec, rules, space), space, policy, spec, meter=meter)
    assert meter.used == 5


def test_known_regions_are_not_retested(spec, rules, space, policy):
    known = [Mfs(15, (FeaturePredicate("transport", "equals", "UD SEND_RECV"),
                      FeaturePredicate("qp_count", "at_least", 32)))]
    calls = []
    p = replace(pause_point(), qp_count=16)
    construct_mfs(p, SimulatorTester(spec, rules, space, call_log=calls), space, policy, spec,
                  known=known)
    assert not any(k.matches(c) for c in calls for k in known)


def test_non_reproducing_point_raises(spec, space, policy):
    p = sample_random(space, 0)
    with pytest.raises(UnstableAnomalyError):
        construct_mfs(p, SimulatorTester(spec, (), space), space, policy, spec)


def test_record_round_trip(spec, rules, space, policy):
    p = pause_point()
    m = simulate(p, spec, rules)
    mfs = construct_mfs(p, SimulatorTester(spec, rules, space), space, policy, spec, anomaly_id=1)
    rec = AnomalyRecord(mfs, p, "pause-anomaly", m, 17, "recv_wqe_cache_miss", 42)
    again = AnomalyRecord.from_dict(json.loads(json.dumps(rec.to_dict())))
    assert again == rec
    assert again.mfs.matches(again.discovery_point)


def test_mfs_predicates_cover_every_feature():
    mfs = Mfs(1, (FeaturePredicate("mtu_bytes", "at_most", 1024),))
    assert [p.feature for p in mfs.predicates] == [f.id for f in FEATURES]
    assert full_predicates(mfs.predicates) == mfs.predicates

import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import points
from rdma_forge.workload import (
    FEATURES,
    FeaturePredicate,
    Mfs,
    Opcode,
    QpType,
    SearchSpace,
    ValidationError,
    WorkloadPoint,
    changed_groups,
    check_space_against_mfs,
    feature_grid,
    grid_size,
    is_valid,
    matches_mfs,
    mutate,
    point_from_features,
    point_problems,
    resize_pattern,
    sample_random,
    set_feature,
)

SPACE = SearchSpace()
RULE1_MFS = Mfs(1, (
    FeaturePredicate("transport", "equals", "UD SEND_RECV"),
    FeaturePredicate("wqe_count", "at_least", 64),
    FeaturePredicate("wq_depth", "at_least", 256),
))


@given(points(SPACE))
def test_point_json_round_trip(p):
    assert WorkloadPoint.from_json(p.to_json()) == p
    assert WorkloadPoint.from_dict(json.loads(json.dumps(p.to_dict()))) == p


@given(points(SPACE))
def test_sampled_points_are_valid(p):
    assert point_problems(p, SPACE) == []


def test_uc_read_is_rejected():
    p = replace(sample_random(SPACE, 0), qp_type=QpType.UC, opcode=Opcode.READ)
    assert any("does not support" in msg for msg in point_problems(p, SPACE))


def test_pattern_length_must_match_sg_elements():
    p = sample_random(SPACE, 1)
    bad = replace(p, message_pattern=p.message_pattern + (64,))
    assert not is_valid(bad, SPACE)


def test_from_dict_names_missing_and_unknown_fields():
    d = sample_random(SPACE, 2).to_dict()
    del d["mtu_bytes"]
    with pytest.raises(ValidationError, match="mtu_bytes"):
        WorkloadPoint.from_dict(d)
    d = sample_random(SPACE, 2).to_dict()
    d["colour"] = "red"
    with pytest.raises(ValidationError, match="colour"):
        WorkloadPoint.from_dict(d)


def test_space_rejects_inconsistent_regions():
    with pytest.raises(ValidationError, match="contiguous"):
        SearchSpace(size_regions=((1, 100), (200, 4 * 1024 * 1024)))
    with pytest.raises(ValidationError, match="unknown"):
        SearchSpace.from_dict({"mtu": [1024]})


def test_space_round_trip():
    s = SearchSpace(wq_depth_choices=(64, 128), qp_count_choices=(1, 8))
    assert SearchSpace.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def test_default_grids_cover_the_table_thresholds():
    assert SPACE.qp_count_grid[-1] == 20_000 and 16384 in SPACE.qp_count_grid
    assert SPACE.mr_count_grid == (1, 16, 256, 1024, 4096, 12288, 65536, 200_000)
    assert SPACE.wq_depth_choices == (16, 64, 128, 256, 1024)
    assert {1024, 2048, 4096, 16384, 65536} <= set(SPACE.message_size_grid)


@given(st.lists(st.sampled_from([64, 1024, 2048, 65536, 4 << 20]), min_size=1, max_size=40),
       st.integers(2, 64))
def test_resize_pattern_keeps_extremes(pattern, k):
    out = resize_pattern(pattern, k)
    assert len(out) == k
    assert min(out) == min(pattern) and max(out) == max(pattern)


def test_resize_pattern_does_not_drop_the_only_small_element():
    assert sorted(resize_pattern((2048, 2048, 64, 64, 1024, 4194304), 3)) == [64, 2048, 4194304]


def test_mutate_stays_in_bounds_over_a_long_chain():
    rng = np.random.default_rng(7)
    p = sample_random(SPACE, rng)
    for _ in range(100_000):
        p = mutate(p, SPACE, rng)
        assert not point_problems(p, SPACE)


@settings(max_examples=300)
@given(points(SPACE), st.integers(0, 2**32 - 1))
def test_mutate_changes_exactly_one_group(p, seed):
    q = mutate(p, SPACE, seed)
    assert q != p
    assert len(changed_groups(p, q)) == 1


def test_mutate_is_deterministic():
    p = sample_random(SPACE, 3)
    assert mutate(p, SPACE, 11) == mutate(p, SPACE, 11)


def test_set_feature_rejects_impossible_layouts():
    p = set_feature(sample_random(SPACE, 4), "wqe_count", 1, SPACE)
    p = set_feature(p, "sge_per_wqe", 8, SPACE)
    assert p is not None
    assert set_feature(p, "wqe_count", 128, SPACE) is None  # 1024 SG elements > n


def _random_predicate(draw, feat, space=SPACE):
    grid = feature_grid(feat.id, space)
    if not feat.numeric:
        return FeaturePredicate(feat.id, "equals", draw(st.sampled_from(grid)))
    kind = draw(st.sampled_from(["at_least", "at_most", "in_region"]))
    a, b = sorted(draw(st.lists(st.sampled_from(grid), min_size=2, max_size=2)))
    return FeaturePredicate(feat.id, kind, a, b if kind == "in_region" else None)


@st.composite
def predicate_sets(draw, space=SPACE):
    feats = draw(st.lists(st.sampled_from(FEATURES), min_size=1, max_size=4, unique_by=lambda f: f.id))
    return [_random_predicate(draw, f, space) for f in feats]


@settings(max_examples=50)
@given(predicate_sets(), st.sampled_from(FEATURES), st.data())
def test_matches_mfs_is_monotone(preds, extra_feat, data):
    if any(p.feature == extra_feat.id for p in preds):
        return
    base = Mfs(1, tuple(preds))
    narrower = Mfs(1, tuple(preds) + (_random_predicate(data.draw, extra_feat),))
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = sample_random(SPACE, rng)
        if narrower.matches(p):
            assert base.matches(p)


def test_matches_mfs_ties_resolve_to_lowest_id():
    p = sample_random(SPACE, 5)
    broad = [Mfs(9, (FeaturePredicate("transport", "equals", p.transport),)),
             Mfs(4, (FeaturePredicate("mtu_bytes", "equals", p.mtu_bytes),))]
    assert matches_mfs(p, broad) == 4
    assert matches_mfs(p, []) is None


def test_check_space_disjoint_on_transport():
    no_ud = SearchSpace(transports=tuple(t for t in SPACE.transports if t[0] != QpType.UD))
    assert check_space_against_mfs(no_ud, [RULE1_MFS]) == []


def test_check_space_full_space_has_a_witness():
    hits = check_space_against_mfs(SPACE, [RULE1_MFS])
    assert [aid for aid, _ in hits] == [1]
    assert RULE1_MFS.matches(hits[0][1]) and is_valid(hits[0][1], SPACE)


def test_check_space_wq_depth_interval_oracle():
    shallow = SearchSpace(wq_depth_choices=(64, 128))
    assert check_space_against_mfs(shallow, [RULE1_MFS]) == []
    deep = SearchSpace(wq_depth_choices=(64, 256))
    assert len(check_space_against_mfs(deep, [RULE1_MFS])) == 1


SMALL = SearchSpace(
    memory_devices=SPACE.memory_devices[:1],
    mr_count_choices=(16, 12288),
    mr_size_choices=(65536,),
    transports=((QpType.UD, Opcode.SEND_RECV), (QpType.RC, Opcode.READ), (QpType.RC, Opcode.WRITE)),
    qp_count_choices=(1, 32),
    mtu_choices=(1024, 4096),
    wq_depth_choices=(64, 256),
    wqe_count_choices=(1, 64),
    sge_choices=(1, 2),
    size_regions=((1, 1024), (1025, 65536), (65537, 4 * 1024 * 1024)),
    loopback_choices=(False,),
)


def _brute_force_hit(mfs, space):
    grids = [feature_grid(f.id, space) for f in FEATURES]
    for combo in itertools.product(*grids):
        p = point_from_features(dict(zip((f.id for f in FEATURES), combo)), space)
        if p is not None and mfs.matches(p):
            return True
    return False


def test_small_space_is_enumerable():
    assert grid_size(SMALL) <= 10_000


@settings(max_examples=40, deadline=None)
@given(predicate_sets(SMALL))
def test_check_space_matches_brute_force(preds):
    mfs = Mfs(1, tuple(preds))
    assert bool(check_space_against_mfs(SMALL, [mfs])) == _brute_force_hit(mfs, SMALL)

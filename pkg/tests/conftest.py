import sys

import numpy as np
import pytest
from hypothesis import strategies as st

import rdma_forge as rf
from rdma_forge.monitor import DetectionPolicy
from rdma_forge.search import Monitor
from rdma_forge.workload import sample_random


@pytest.fixture(scope="session")
def spec():
    return rf.reference_spec()


@pytest.fixture(scope="session")
def space(spec):
    return rf.reference_space(spec)


@pytest.fixture(scope="session")
def rules():
    return tuple(rf.reference_rules())


@pytest.fixture
def tester(spec, rules, space):
    return rf.SimulatorTester(spec, rules, space)


@pytest.fixture(scope="session")
def policy():
    return DetectionPolicy()


@pytest.fixture(scope="session")
def monitor(spec):
    return Monitor(spec)


@pytest.fixture(scope="session")
def rule_by_id(rules):
    return {r.id: r for r in rules}


def points(space):
    """Hypothesis strategy: valid points drawn through the sampler's own rng."""
    return st.integers(0, 2**32 - 1).map(lambda s: sample_random(space, np.random.default_rng(s)))


def isolated_point(rule, rules, space, rng, max_tries=10**6):
    """Random point inside ``rule`` and outside every other rule."""
    for _ in range(max_tries):
        p = sample_random(space, rng)
        if [r for r in rules if r.matches(p)] == [rule]:
            return p
    raise AssertionError(f"no isolated point for rule {rule.id}")


def pytest_terminal_summary(terminalreporter):
    # acceptance verdicts are printed even when output capture hides them
    lines = getattr(sys.modules.get("test_acceptance"), "_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

"""Counter-guided search for RDMA performance anomalies against a simulated subsystem."""

from importlib import resources

from .monitor import AnomalyRecord, DetectionPolicy, UnstableAnomalyError, construct_mfs, detect, measure_stable
from .search import (
    CounterObjective,
    Monitor,
    SaConfig,
    SearchResult,
    delta_energy,
    rank_counters,
    run_campaign,
    search_random,
    search_sa,
)
from .simulator import (
    AnomalyRule,
    Measurement,
    SimulatorTester,
    SubsystemSpec,
    baseline_throughput,
    load_rules,
    load_spec,
    simulate,
)
from .workload import (
    FeaturePredicate,
    Mfs,
    SearchSpace,
    ValidationError,
    WorkloadPoint,
    check_space_against_mfs,
    matches_mfs,
    mutate,
    sample_random,
    validate,
)

__version__ = "0.1.0"


def data_path(name: str):
    """Path of a file shipped in the package data directory."""
    return resources.files(__name__) / "data" / name


def reference_spec() -> SubsystemSpec:
    return SubsystemSpec()


def reference_rules() -> list[AnomalyRule]:
    return load_rules(data_path("reference_rules.json"))


def reference_space(spec: SubsystemSpec | None = None) -> SearchSpace:
    spec = spec or reference_spec()
    return SearchSpace(request_vector_len_n=spec.request_vector_len)

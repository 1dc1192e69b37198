"""Workload search space, workload points, mutation and MFS-region matching.

A workload point is a flat record covering four dimension groups:

1. host topology (source/destination memory device, loopback placement)
2. memory allocation (MR count and size)
3. transport setting (QP type/opcode, QP count, direction, MTU, WQ depth,
   WQE batch / SG layout)
4. message pattern (the request vector of message sizes)

Search, MFS construction and rule matching all operate on a small set of
*features* derived from a point (see ``FEATURES``).  Every feature has a
discretization grid taken from the ``SearchSpace``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from functools import cached_property
from typing import Any, Callable, Iterable, Sequence

import numpy as np

KB = 1024
MB = 1024 * 1024


class ValidationError(ValueError):
    """Raised when a point, space, or file does not satisfy its schema."""


class QpType(str, Enum):
    RC = "RC"
    UC = "UC"
    UD = "UD"


class Opcode(str, Enum):
    SEND_RECV = "SEND_RECV"
    WRITE = "WRITE"
    READ = "READ"


class Direction(str, Enum):
    UNIDIRECTIONAL = "unidirectional"
    BIDIRECTIONAL = "bidirectional"


VALID_OPCODES: dict[QpType, frozenset[Opcode]] = {
    QpType.UD: frozenset({Opcode.SEND_RECV}),
    QpType.UC: frozenset({Opcode.SEND_RECV, Opcode.WRITE}),
    QpType.RC: frozenset({Opcode.SEND_RECV, Opcode.WRITE, Opcode.READ}),
}

ALL_TRANSPORTS: tuple[tuple[QpType, Opcode], ...] = tuple(
    (qt, op) for qt in QpType for op in Opcode if op in VALID_OPCODES[qt]
)

DEVICE_KINDS = ("numa-dram", "gpu")
DEVICE_LOCALITIES = ("nic-affine", "cross-socket", "cross-pcie-bridge")

DEFAULT_MR_COUNT_GRID = (1, 16, 256, 1 * KB, 4 * KB, 12 * KB, 64 * KB, 200_000)
DEFAULT_MR_SIZE_GRID = (4 * KB, 64 * KB, 256 * KB, 1 * MB, 4 * MB)
DEFAULT_WQ_DEPTHS = (16, 64, 128, 256, 1024)
DEFAULT_MTUS = (1024, 2048, 4096)
DEFAULT_SGE_GRID = (1, 2, 3, 4, 8)
# message-size region upper bounds: 64B, 1KB, the MTU classes, burst size, 64KB, 1MB, 4MB
DEFAULT_SIZE_BOUNDS = (64, 1 * KB, 2 * KB, 4 * KB, 16 * KB, 64 * KB, 1 * MB, 4 * MB)


def transport_key(qp_type: QpType | str, opcode: Opcode | str) -> str:
    return f"{QpType(qp_type).value} {Opcode(opcode).value}"


def parse_transport(key: str) -> tuple[QpType, Opcode]:
    try:
        qt, op = key.split()
        return QpType(qt), Opcode(op)
    except ValueError as exc:
        raise ValidationError(f"bad transport {key!r}; expected e.g. 'RC WRITE'") from exc


def powers_of_two_grid(upper: int) -> tuple[int, ...]:
    grid = []
    v = 1
    while v <= upper:
        grid.append(v)
        v *= 2
    if grid[-1] != upper:
        grid.append(upper)
    return tuple(grid)


def _bounded_grid(defaults: Sequence[int], upper: int) -> tuple[int, ...]:
    grid = sorted({v for v in defaults if v <= upper} | {upper})
    return tuple(grid)


@dataclass(frozen=True)
class MemoryDevice:
    kind: str = "numa-dram"
    locality: str = "nic-affine"

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise ValidationError(f"memory device kind must be one of {DEVICE_KINDS}, got {self.kind!r}")
        if self.locality not in DEVICE_LOCALITIES:
            raise ValidationError(
                f"memory device locality must be one of {DEVICE_LOCALITIES}, got {self.locality!r}"
            )

    @property
    def remote_path(self) -> bool:
        return self.locality != "nic-affine"

    def label(self) -> str:
        return f"{self.kind}/{self.locality}"


DEFAULT_DEVICES = (
    MemoryDevice("numa-dram", "nic-affine"),
    MemoryDevice("numa-dram", "cross-socket"),
    MemoryDevice("gpu", "nic-affine"),
    MemoryDevice("gpu", "cross-pcie-bridge"),
)


def default_size_regions(mr_size_max_bytes: int = 4 * MB) -> tuple[tuple[int, int], ...]:
    bounds = [b for b in DEFAULT_SIZE_BOUNDS if b < mr_size_max_bytes] + [mr_size_max_bytes]
    regions = []
    lo = 1
    for hi in bounds:
        regions.append((lo, hi))
        lo = hi + 1
    return tuple(regions)


@dataclass(frozen=True)
class SearchSpace:
    memory_devices: tuple[MemoryDevice, ...] = DEFAULT_DEVICES
    mr_count_max: int = 200_000
    mr_size_max_bytes: int = 4 * MB
    qp_count_max: int = 20_000
    transports: tuple[tuple[QpType, Opcode], ...] = ALL_TRANSPORTS
    mtu_choices: tuple[int, ...] = DEFAULT_MTUS
    wq_depth_choices: tuple[int, ...] = DEFAULT_WQ_DEPTHS
    request_vector_len_n: int = 128
    size_regions: tuple[tuple[int, int], ...] = default_size_regions()
    # restriction knobs; None means "derive the default grid"
    directions: tuple[Direction, ...] = (Direction.UNIDIRECTIONAL, Direction.BIDIRECTIONAL)
    loopback_choices: tuple[bool, ...] = (False, True)
    mr_count_choices: tuple[int, ...] | None = None
    mr_size_choices: tuple[int, ...] | None = None
    qp_count_choices: tuple[int, ...] | None = None
    wqe_count_choices: tuple[int, ...] | None = None
    sge_choices: tuple[int, ...] = DEFAULT_SGE_GRID

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValidationError("invalid search space: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not self.memory_devices:
            out.append("memory_devices is empty")
        if self.mr_count_max < 1:
            out.append("mr_count_max must be >= 1")
        if self.qp_count_max < 1:
            out.append("qp_count_max must be >= 1")
        if self.request_vector_len_n < 1:
            out.append("request_vector_len_n must be >= 1")
        if self.mr_size_max_bytes < 1:
            out.append("mr_size_max_bytes must be >= 1")
        if not self.transports:
            out.append("transports is empty")
        for qt, op in self.transports:
            if Opcode(op) not in VALID_OPCODES[QpType(qt)]:
                out.append(f"transport ({qt.value}, {op.value}) is not a valid verbs combination")
        for name in ("mtu_choices", "wq_depth_choices", "directions", "loopback_choices", "sge_choices"):
            if not getattr(self, name):
                out.append(f"{name} is empty")
        regions = self.size_regions
        if not regions:
            out.append("size_regions is empty")
        else:
            if regions[0][0] != 1:
                out.append("size_regions must start at 1 byte")
            if regions[-1][1] != self.mr_size_max_bytes:
                out.append("size_regions must end at mr_size_max_bytes")
            for (lo, hi), (nlo, _) in zip(regions, regions[1:]):
                if nlo != hi + 1:
                    out.append("size_regions must be ordered, disjoint and contiguous")
                    break
            if any(lo > hi for lo, hi in regions):
                out.append("size_regions contain an empty interval")
        for name, upper in (
            ("mr_count_choices", self.mr_count_max),
            ("mr_size_choices", self.mr_size_max_bytes),
            ("qp_count_choices", self.qp_count_max),
            ("wqe_count_choices", self.request_vector_len_n),
        ):
            vals = getattr(self, name)
            if vals is not None and (not vals or min(vals) < 1 or max(vals) > upper):
                out.append(f"{name} must be non-empty and within [1, {upper}]")
        if self.sge_choices and min(self.sge_choices) < 1:
            out.append("sge_choices must be >= 1")
        return out

    # -- discretization grids -------------------------------------------------

    @cached_property
    def mr_count_grid(self) -> tuple[int, ...]:
        if self.mr_count_choices is not None:
            return tuple(sorted(set(self.mr_count_choices)))
        return _bounded_grid(DEFAULT_MR_COUNT_GRID, self.mr_count_max)

    @cached_property
    def mr_size_grid(self) -> tuple[int, ...]:
        if self.mr_size_choices is not None:
            return tuple(sorted(set(self.mr_size_choices)))
        return _bounded_grid(DEFAULT_MR_SIZE_GRID, self.mr_size_max_bytes)

    @cached_property
    def qp_count_grid(self) -> tuple[int, ...]:
        if self.qp_count_choices is not None:
            return tuple(sorted(set(self.qp_count_choices)))
        return powers_of_two_grid(self.qp_count_max)

    @cached_property
    def wqe_count_grid(self) -> tuple[int, ...]:
        if self.wqe_count_choices is not None:
            return tuple(sorted(set(self.wqe_count_choices)))
        return tuple(v for v in powers_of_two_grid(self.request_vector_len_n) if v & (v - 1) == 0)

    @cached_property
    def message_size_grid(self) -> tuple[int, ...]:
        return tuple(hi for _, hi in self.size_regions)

    @cached_property
    def transport_keys(self) -> tuple[str, ...]:
        return tuple(transport_key(qt, op) for qt, op in self.transports)

    def region_of(self, size: int) -> int:
        for i, (lo, hi) in enumerate(self.size_regions):
            if lo <= size <= hi:
                return i
        raise ValidationError(f"message size {size} outside size regions")

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "memory_devices": [{"kind": d.kind, "locality": d.locality} for d in self.memory_devices],
            "mr_count_max": self.mr_count_max,
            "mr_size_max_bytes": self.mr_size_max_bytes,
            "qp_count_max": self.qp_count_max,
            "transports": [[qt.value, op.value] for qt, op in self.transports],
            "mtu_choices": list(self.mtu_choices),
            "wq_depth_choices": list(self.wq_depth_choices),
            "request_vector_len_n": self.request_vector_len_n,
            "size_regions": [list(r) for r in self.size_regions],
            "directions": [d.value for d in self.directions],
            "loopback_choices": list(self.loopback_choices),
            "mr_count_choices": None if self.mr_count_choices is None else list(self.mr_count_choices),
            "mr_size_choices": None if self.mr_size_choices is None else list(self.mr_size_choices),
            "qp_count_choices": None if self.qp_count_choices is None else list(self.qp_count_choices),
            "wqe_count_choices": None if self.wqe_count_choices is None else list(self.wqe_count_choices),
            "sge_choices": list(self.sge_choices),
        }

    @classmethod
    def from_dict(cls, data: dict, base: "SearchSpace | None" = None) -> "SearchSpace":
        """Build a space from JSON data; missing keys fall back to ``base`` (or the defaults)."""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown search space field(s): {sorted(unknown)}")
        kw: dict[str, Any] = {}
        try:
            for key, value in data.items():
                if key == "memory_devices":
                    kw[key] = tuple(MemoryDevice(**d) for d in value)
                elif key == "transports":
                    kw[key] = tuple((QpType(qt), Opcode(op)) for qt, op in value)
                elif key == "size_regions":
                    kw[key] = tuple((int(lo), int(hi)) for lo, hi in value)
                elif key == "directions":
                    kw[key] = tuple(Direction(d) for d in value)
                elif key == "loopback_choices":
                    kw[key] = tuple(bool(v) for v in value)
                elif key.endswith("_choices"):
                    kw[key] = None if value is None else tuple(int(v) for v in value)
                else:
                    kw[key] = int(value)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"search space field {key!r}: {exc}") from exc
        if "mr_size_max_bytes" in kw and "size_regions" not in kw:
            kw["size_regions"] = default_size_regions(kw["mr_size_max_bytes"])
        if base is None:
            return cls(**kw)
        return replace(base, **kw)


@dataclass(frozen=True)
class WorkloadPoint:
    src_device: int
    dst_device: int
    mr_count: int
    mr_size_bytes: int
    qp_type: QpType
    opcode: Opcode
    qp_count: int
    direction: Direction
    mtu_bytes: int
    wq_depth: int
    wqe_batch: tuple[int, ...]
    message_pattern: tuple[int, ...]
    loopback: bool = False

    @property
    def transport(self) -> str:
        return transport_key(self.qp_type, self.opcode)

    @property
    def wqe_count(self) -> int:
        return len(self.wqe_batch)

    @property
    def sge_per_wqe(self) -> int:
        return max(self.wqe_batch)

    def to_dict(self) -> dict:
        return {
            "src_device": self.src_device,
            "dst_device": self.dst_device,
            "mr_count": self.mr_count,
            "mr_size_bytes": self.mr_size_bytes,
            "qp_type": self.qp_type.value,
            "opcode": self.opcode.value,
            "qp_count": self.qp_count,
            "direction": self.direction.value,
            "mtu_bytes": self.mtu_bytes,
            "wq_depth": self.wq_depth,
            "wqe_batch": list(self.wqe_batch),
            "message_pattern": list(self.message_pattern),
            "loopback": self.loopback,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadPoint":
        required = {f.name for f in fields(cls)} - {"loopback"}
        missing = required - set(data)
        if missing:
            raise ValidationError(f"workload point is missing field(s): {sorted(missing)}")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown workload point field(s): {sorted(unknown)}")
        try:
            return cls(
                src_device=_as_int(data["src_device"], "src_device"),
                dst_device=_as_int(data["dst_device"], "dst_device"),
                mr_count=_as_int(data["mr_count"], "mr_count"),
                mr_size_bytes=_as_int(data["mr_size_bytes"], "mr_size_bytes"),
                qp_type=QpType(data["qp_type"]),
                opcode=Opcode(data["opcode"]),
                qp_count=_as_int(data["qp_count"], "qp_count"),
                direction=Direction(data["direction"]),
                mtu_bytes=_as_int(data["mtu_bytes"], "mtu_bytes"),
                wq_depth=_as_int(data["wq_depth"], "wq_depth"),
                wqe_batch=tuple(_as_int(v, "wqe_batch") for v in data["wqe_batch"]),
                message_pattern=tuple(_as_int(v, "message_pattern") for v in data["message_pattern"]),
                loopback=bool(data.get("loopback", False)),
            )
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"workload point: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WorkloadPoint":
        return cls.from_dict(json.loads(text))


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValidationError(f"field {name!r} must be an integer, got {value!r}")
    return int(value)


def point_problems(point: WorkloadPoint, space: SearchSpace) -> list[str]:
    """Return every invariant violation of ``point`` within ``space`` (empty if valid)."""
    out = []
    n_dev = len(space.memory_devices)
    for name in ("src_device", "dst_device"):
        idx = getattr(point, name)
        if not 0 <= idx < n_dev:
            out.append(f"{name}={idx} is not an index into memory_devices (0..{n_dev - 1})")
    if not 1 <= point.mr_count <= space.mr_count_max:
        out.append(f"mr_count={point.mr_count} outside [1, {space.mr_count_max}]")
    if not 1 <= point.mr_size_bytes <= space.mr_size_max_bytes:
        out.append(f"mr_size_bytes={point.mr_size_bytes} outside [1, {space.mr_size_max_bytes}]")
    if point.opcode not in VALID_OPCODES[point.qp_type]:
        out.append(f"{point.qp_type.value} does not support {point.opcode.value}")
    elif (point.qp_type, point.opcode) not in space.transports:
        out.append(f"transport {point.transport} is not allowed in this space")
    if not 1 <= point.qp_count <= space.qp_count_max:
        out.append(f"qp_count={point.qp_count} outside [1, {space.qp_count_max}]")
    if point.direction not in space.directions:
        out.append(f"direction {point.direction.value} is not allowed in this space")
    if point.loopback not in space.loopback_choices:
        out.append(f"loopback={point.loopback} is not allowed in this space")
    if point.mtu_bytes not in space.mtu_choices:
        out.append(f"mtu_bytes={point.mtu_bytes} not in {list(space.mtu_choices)}")
    if point.wq_depth not in space.wq_depth_choices:
        out.append(f"wq_depth={point.wq_depth} not in {list(space.wq_depth_choices)}")
    if not point.wqe_batch:
        out.append("wqe_batch is empty")
    elif min(point.wqe_batch) < 1:
        out.append("every WQE needs at least one SG element")
    if sum(point.wqe_batch) != len(point.message_pattern):
        out.append(
            f"sum(wqe_batch)={sum(point.wqe_batch)} != len(message_pattern)={len(point.message_pattern)}"
        )
    if len(point.message_pattern) > space.request_vector_len_n:
        out.append(
            f"message_pattern has {len(point.message_pattern)} elements, "
            f"more than request_vector_len_n={space.request_vector_len_n}"
        )
    for size in point.message_pattern:
        if not 1 <= size <= space.mr_size_max_bytes:
            out.append(f"message size {size} outside [1, {space.mr_size_max_bytes}]")
            break
    return out


def is_valid(point: WorkloadPoint, space: SearchSpace) -> bool:
    return not point_problems(point, space)


def validate(point: WorkloadPoint, space: SearchSpace) -> WorkloadPoint:
    problems = point_problems(point, space)
    if problems:
        raise ValidationError("invalid workload point: " + "; ".join(problems))
    return point


def resize_pattern(pattern: Sequence[int], k: int) -> tuple[int, ...]:
    """Cycle/truncate ``pattern`` to ``k`` elements, keeping its smallest and largest sizes."""
    base = list(pattern)
    out = [base[i % len(base)] for i in range(k)]
    if k >= 2:
        lo, hi = min(base), max(base)
        if lo not in out:
            out[0] = lo
        if hi not in out:
            # never overwrite the only copy of the smallest size
            j = k - 1 if out[k - 1] != lo or out.count(lo) > 1 else 0
            out[j] = hi
    return tuple(out)


# -- features ------------------------------------------------------------------

Setter = Callable[[WorkloadPoint, Any, SearchSpace], "WorkloadPoint | None"]


@dataclass(frozen=True)
class Feature:
    id: str
    group: int
    numeric: bool
    get: Callable[[WorkloadPoint], Any]
    choices: Callable[[SearchSpace], tuple]
    set: Setter
    label: str = ""


def _set_field(name: str) -> Setter:
    def setter(point, value, space):
        return replace(point, **{name: value})

    return setter


def _set_transport(point, value, space):
    qt, op = parse_transport(value)
    return replace(point, qp_type=qt, opcode=op)


def _set_wqe_count(point, value, space):
    sge = point.sge_per_wqe
    k = value * sge
    return replace(point, wqe_batch=(sge,) * value, message_pattern=resize_pattern(point.message_pattern, k))


def _set_sge(point, value, space):
    n = point.wqe_count
    k = n * value
    return replace(point, wqe_batch=(value,) * n, message_pattern=resize_pattern(point.message_pattern, k))


def _set_msg_min(point, value, space):
    pattern = [max(s, value) for s in point.message_pattern]
    i = int(np.argmin(point.message_pattern))
    pattern[i] = value
    return replace(point, message_pattern=tuple(pattern))


def _set_msg_max(point, value, space):
    pattern = [min(s, value) for s in point.message_pattern]
    i = int(np.argmax(point.message_pattern))
    pattern[i] = value
    return replace(point, message_pattern=tuple(pattern))


FEATURES: tuple[Feature, ...] = (
    Feature("src_device", 1, False, lambda p: p.src_device,
            lambda s: tuple(range(len(s.memory_devices))), _set_field("src_device"), "source device"),
    Feature("dst_device", 1, False, lambda p: p.dst_device,
            lambda s: tuple(range(len(s.memory_devices))), _set_field("dst_device"), "destination device"),
    Feature("loopback", 1, False, lambda p: p.loopback,
            lambda s: tuple(s.loopback_choices), _set_field("loopback"), "loopback"),
    Feature("mr_count", 2, True, lambda p: p.mr_count,
            lambda s: s.mr_count_grid, _set_field("mr_count"), "MRs"),
    Feature("mr_size_bytes", 2, True, lambda p: p.mr_size_bytes,
            lambda s: s.mr_size_grid, _set_field("mr_size_bytes"), "MR size"),
    Feature("transport", 3, False, lambda p: p.transport,
            lambda s: s.transport_keys, _set_transport, "Transport"),
    Feature("qp_count", 3, True, lambda p: p.qp_count,
            lambda s: s.qp_count_grid, _set_field("qp_count"), "# of QPs"),
    Feature("direction", 3, False, lambda p: p.direction.value,
            lambda s: tuple(d.value for d in s.directions),
            lambda p, v, s: replace(p, direction=Direction(v)), "Direc."),
    Feature("mtu_bytes", 3, True, lambda p: p.mtu_bytes,
            lambda s: tuple(sorted(s.mtu_choices)), _set_field("mtu_bytes"), "MTU"),
    Feature("wq_depth", 3, True, lambda p: p.wq_depth,
            lambda s: tuple(sorted(s.wq_depth_choices)), _set_field("wq_depth"), "WQ depth"),
    Feature("wqe_count", 3, True, lambda p: p.wqe_count,
            lambda s: s.wqe_count_grid, _set_wqe_count, "WQE"),
    Feature("sge_per_wqe", 3, True, lambda p: p.sge_per_wqe,
            lambda s: tuple(sorted(s.sge_choices)), _set_sge, "SGE"),
    Feature("msg_size_min", 4, True, lambda p: min(p.message_pattern),
            lambda s: s.message_size_grid, _set_msg_min, "smallest message"),
    Feature("msg_size_max", 4, True, lambda p: max(p.message_pattern),
            lambda s: s.message_size_grid, _set_msg_max, "largest message"),
)

FEATURE_BY_ID: dict[str, Feature] = {f.id: f for f in FEATURES}
FEATURE_IDS: tuple[str, ...] = tuple(f.id for f in FEATURES)
GROUPS: dict[int, tuple[Feature, ...]] = {
    g: tuple(f for f in FEATURES if f.group == g) for g in (1, 2, 3, 4)
}
# features whose values are coupled through the pattern: pinning one may force the other
COUPLED_FEATURES = {"msg_size_min": "msg_size_max", "msg_size_max": "msg_size_min"}


def feature_vector(point: WorkloadPoint) -> dict[str, Any]:
    return {f.id: f.get(point) for f in FEATURES}


def feature_grid(feature_id: str, space: SearchSpace) -> tuple:
    return FEATURE_BY_ID[feature_id].choices(space)


def set_feature(point: WorkloadPoint, feature_id: str, value: Any, space: SearchSpace) -> WorkloadPoint | None:
    """Return ``point`` with one feature moved to ``value``, or None if that yields an invalid point."""
    feat = FEATURE_BY_ID[feature_id]
    try:
        new = feat.set(point, value, space)
    except (ValueError, ValidationError):
        return None
    if new is None or not is_valid(new, space):
        return None
    return new


# -- predicates and minimal feature sets -----------------------------------------

PREDICATE_KINDS = ("equals", "at_least", "at_most", "in_region", "any")


@dataclass(frozen=True)
class FeaturePredicate:
    feature: str
    kind: str = "any"
    value: Any = None
    high: Any = None  # upper bound for in_region; ``value`` is the lower bound

    def __post_init__(self):
        if self.feature not in FEATURE_BY_ID:
            raise ValidationError(f"unknown feature {self.feature!r}")
        if self.kind not in PREDICATE_KINDS:
            raise ValidationError(f"unknown predicate kind {self.kind!r}")
        if self.kind in ("at_least", "at_most", "in_region") and not FEATURE_BY_ID[self.feature].numeric:
            raise ValidationError(f"{self.kind} needs a numeric feature, {self.feature!r} is categorical")
        if self.kind == "in_region" and (self.value is None or self.high is None or self.value > self.high):
            raise ValidationError(f"in_region on {self.feature!r} needs value <= high")

    @property
    def constrained(self) -> bool:
        return self.kind != "any"

    def holds(self, v: Any) -> bool:
        if self.kind == "any":
            return True
        if self.kind == "equals":
            return v == self.value
        if self.kind == "at_least":
            return v >= self.value
        if self.kind == "at_most":
            return v <= self.value
        return self.value <= v <= self.high

    def matches(self, point: WorkloadPoint) -> bool:
        return self.holds(FEATURE_BY_ID[self.feature].get(point))

    def allowed(self, grid: Iterable) -> tuple:
        return tuple(v for v in grid if self.holds(v))

    def to_dict(self) -> dict:
        d = {"feature": self.feature, "kind": self.kind}
        if self.kind in ("equals", "at_least", "at_most"):
            d["value"] = self.value
        elif self.kind == "in_region":
            d["value"] = [self.value, self.high]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "FeaturePredicate":
        try:
            feature, kind = data["feature"], data.get("kind", "any")
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"predicate needs a 'feature' key: {data!r}") from exc
        value = data.get("value")
        if kind == "in_region":
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ValidationError(f"in_region predicate on {feature!r} needs value [low, high]")
            return cls(feature, kind, value[0], value[1])
        if kind != "any" and value is None:
            raise ValidationError(f"{kind} predicate on {feature!r} needs a value")
        return cls(feature, kind, value if kind != "any" else None)


def full_predicates(preds: Iterable[FeaturePredicate]) -> tuple[FeaturePredicate, ...]:
    """Expand constrained predicates to one predicate per feature (``any`` for the rest)."""
    by_id: dict[str, FeaturePredicate] = {}
    for p in preds:
        if p.feature in by_id and by_id[p.feature].constrained and p.constrained:
            raise ValidationError(f"feature {p.feature!r} constrained twice")
        if p.constrained or p.feature not in by_id:
            by_id[p.feature] = p
    return tuple(by_id.get(fid, FeaturePredicate(fid)) for fid in FEATURE_IDS)


def region_matches(preds: Iterable[FeaturePredicate], point: WorkloadPoint) -> bool:
    return all(p.matches(point) for p in preds)


@dataclass(frozen=True)
class Mfs:
    anomaly_id: int
    predicates: tuple[FeaturePredicate, ...]
    symptom: str = "pause-anomaly"
    severity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "predicates", full_predicates(self.predicates))

    def matches(self, point: WorkloadPoint) -> bool:
        return region_matches(self.predicates, point)

    @property
    def constrained(self) -> tuple[FeaturePredicate, ...]:
        return tuple(p for p in self.predicates if p.constrained)

    def predicate(self, feature_id: str) -> FeaturePredicate:
        return self.predicates[FEATURE_IDS.index(feature_id)]

    def relaxed(self, feature_id: str) -> "Mfs":
        preds = tuple(FeaturePredicate(p.feature) if p.feature == feature_id else p for p in self.predicates)
        return replace(self, predicates=preds)

    def to_dict(self) -> dict:
        return {
            "anomaly_id": self.anomaly_id,
            "symptom": self.symptom,
            "severity": self.severity,
            "predicates": [p.to_dict() for p in self.predicates],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Mfs":
        try:
            return cls(
                anomaly_id=int(data["anomaly_id"]),
                predicates=tuple(FeaturePredicate.from_dict(p) for p in data["predicates"]),
                symptom=data.get("symptom", "pause-anomaly"),
                severity=float(data.get("severity", 0.0)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed MFS entry: {exc}") from exc


def matches_mfs(point: WorkloadPoint, anomalies: Iterable[Mfs]) -> int | None:
    """Id of the matching MFS (lowest id wins on ties), or None."""
    hits = [m.anomaly_id for m in anomalies if m.matches(point)]
    return min(hits) if hits else None


# -- sampling and mutation -------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _pick(rng: np.random.Generator, seq: Sequence):
    return seq[int(rng.integers(len(seq)))]


def sample_random(space: SearchSpace, seed=None) -> WorkloadPoint:
    """Draw a point uniformly per dimension over the discretized choices."""
    rng = _rng(seed)
    n_dev = len(space.memory_devices)
    qt, op = _pick(rng, space.transports)
    wqe_count = _pick(rng, space.wqe_count_grid)
    sges = [s for s in sorted(space.sge_choices) if s * wqe_count <= space.request_vector_len_n]
    if not sges:
        wqe_count = min(space.wqe_count_grid)
        sges = [min(space.sge_choices)]
    sge = _pick(rng, sges)
    k = wqe_count * sge
    sizes = space.message_size_grid
    pattern = tuple(int(sizes[i]) for i in rng.integers(len(sizes), size=k))
    return WorkloadPoint(
        src_device=int(rng.integers(n_dev)),
        dst_device=int(rng.integers(n_dev)),
        mr_count=int(_pick(rng, space.mr_count_grid)),
        mr_size_bytes=int(_pick(rng, space.mr_size_grid)),
        qp_type=QpType(qt),
        opcode=Opcode(op),
        qp_count=int(_pick(rng, space.qp_count_grid)),
        direction=_pick(rng, space.directions),
        mtu_bytes=int(_pick(rng, space.mtu_choices)),
        wq_depth=int(_pick(rng, space.wq_depth_choices)),
        wqe_batch=(sge,) * wqe_count,
        message_pattern=pattern,
        loopback=bool(_pick(rng, space.loopback_choices)),
    )


def _neighbour_value(grid: Sequence, current, rng: np.random.Generator, p_local: float):
    """Adjacent grid value with probability p_local, else any other grid value."""
    grid = sorted(set(grid) | {current})
    idx = grid.index(current)
    others = [v for v in grid if v != current]
    if not others:
        return None
    if rng.random() < p_local:
        adjacent = [grid[j] for j in (idx - 1, idx + 1) if 0 <= j < len(grid)]
        return _pick(rng, adjacent)
    return _pick(rng, others)


def _mutate_pattern(point, space, rng, p_local):
    """Move one request to another size region, or (half the time) every request sharing its size."""
    pattern = list(point.message_pattern)
    j = int(rng.integers(len(pattern)))
    old = pattern[j]
    new = _neighbour_value(space.message_size_grid, old, rng, p_local)
    if new is None:
        return None
    if rng.random() < 0.5:
        pattern = [int(new) if s == old else s for s in pattern]
    else:
        pattern[j] = int(new)
    return replace(point, message_pattern=tuple(pattern))


def mutate(point: WorkloadPoint, space: SearchSpace, seed=None, p_local: float = 0.8,
           max_tries: int = 64) -> WorkloadPoint:
    """Move ``point`` along one feature, hence within exactly one dimension group.

    Numeric features step to an adjacent grid value with probability ``p_local``
    and jump to a uniformly chosen grid value otherwise; categorical features
    jump to another allowed value.  A message-pattern move shifts one request,
    or every request of the same size, to another size region.
    """
    rng = _rng(seed)
    # every mutable feature is equally likely; the two message-size features share the pattern move
    units = [f for f in FEATURES if f.group != 4 and len(f.choices(space)) > 1]
    if len(space.message_size_grid) > 1:
        units += [None, None]
    if not units:
        raise RuntimeError("could not find a valid mutation; the search space is degenerate")
    for _ in range(max_tries):
        feat = _pick(rng, units)
        if feat is None:
            new = _mutate_pattern(point, space, rng, p_local)
        else:
            current = feat.get(point)
            if feat.numeric:
                value = _neighbour_value(feat.choices(space), current, rng, p_local)
            else:
                others = [v for v in feat.choices(space) if v != current]
                value = _pick(rng, others) if others else None
            if value is None:
                continue
            if isinstance(value, np.generic):
                value = value.item()
            new = set_feature(point, feat.id, value, space)
        if new is not None and new != point and is_valid(new, space):
            return new
    raise RuntimeError("could not find a valid mutation; the search space is degenerate")


GROUP_FIELDS = {
    1: ("src_device", "dst_device", "loopback"),
    2: ("mr_count", "mr_size_bytes"),
    3: ("qp_type", "opcode", "qp_count", "direction", "mtu_bytes", "wq_depth", "wqe_batch"),
    4: ("message_pattern",),
}


def changed_groups(a: WorkloadPoint, b: WorkloadPoint) -> set[int]:
    """Dimension groups in which ``b`` differs from ``a``.

    A message-pattern length change forced by a new WQE layout counts as a
    transport-group change; only content changes beyond ``resize_pattern``
    count against the message-pattern group.
    """
    out = set()
    for g in (1, 2, 3):
        if any(getattr(a, f) != getattr(b, f) for f in GROUP_FIELDS[g]):
            out.add(g)
    if b.message_pattern != resize_pattern(a.message_pattern, len(b.message_pattern)):
        out.add(4)
    return out


# -- anomaly prevention: restricted space vs known MFS -------------------------------

def point_from_features(values: dict[str, Any], space: SearchSpace) -> WorkloadPoint | None:
    """Build a point with exactly the given feature values, or None if impossible."""
    wqe_count, sge = values["wqe_count"], values["sge_per_wqe"]
    lo, hi = values["msg_size_min"], values["msg_size_max"]
    k = wqe_count * sge
    if lo > hi or (k == 1 and lo != hi):
        return None
    pattern = (lo,) if k == 1 else (lo,) + (hi,) * (k - 1)
    qt, op = parse_transport(values["transport"])
    point = WorkloadPoint(
        src_device=values["src_device"],
        dst_device=values["dst_device"],
        mr_count=values["mr_count"],
        mr_size_bytes=values["mr_size_bytes"],
        qp_type=qt,
        opcode=op,
        qp_count=values["qp_count"],
        direction=Direction(values["direction"]),
        mtu_bytes=values["mtu_bytes"],
        wq_depth=values["wq_depth"],
        wqe_batch=(sge,) * wqe_count,
        message_pattern=pattern,
        loopback=values["loopback"],
    )
    return point if is_valid(point, space) else None


def _witness(mfs: Mfs, space: SearchSpace) -> WorkloadPoint | None:
    allowed = {}
    for pred in mfs.predicates:
        vals = pred.allowed(feature_grid(pred.feature, space))
        if not vals:
            return None
        allowed[pred.feature] = vals
    # only the WQE layout and the pattern extremes are coupled; everything else is free
    base = {fid: vals[0] for fid, vals in allowed.items()}
    for wqe_count, sge in itertools.product(allowed["wqe_count"], allowed["sge_per_wqe"]):
        if wqe_count * sge > space.request_vector_len_n:
            continue
        for lo, hi in itertools.product(allowed["msg_size_min"], allowed["msg_size_max"]):
            values = dict(base, wqe_count=wqe_count, sge_per_wqe=sge, msg_size_min=lo, msg_size_max=hi)
            point = point_from_features(values, space)
            if point is not None and mfs.matches(point):
                return point
    return None


def check_space_against_mfs(restricted: SearchSpace, anomalies: Iterable[Mfs]) -> list[tuple[int, WorkloadPoint]]:
    """One witness point per known MFS whose region intersects ``restricted``."""
    out = []
    for mfs in sorted(anomalies, key=lambda m: m.anomaly_id):
        point = _witness(mfs, restricted)
        if point is not None:
            out.append((mfs.anomaly_id, point))
    return out


def grid_size(space: SearchSpace) -> int:
    return math.prod(len(f.choices(space)) for f in FEATURES)

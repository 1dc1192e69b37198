"""Campaign configuration files and the reproducibility manifest."""

from __future__ import annotations

import hashlib
import json
import shlex
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .monitor import DetectionPolicy
from .search import ALL_COUNTERS, SaConfig
from .simulator import DIAG_COUNTERS, AnomalyRule, SubsystemSpec, _load_json, load_rules
from .workload import SearchSpace, ValidationError

CONFIG_KEYS = ("spec", "rules", "adapter", "space", "sa", "detection", "counters",
               "output_dir", "seed", "duration_s", "adapter_timeout_s")
DEFAULT_COUNTERS = DIAG_COUNTERS


class ConfigError(ValidationError):
    """A configuration problem, located by file, line and field where possible."""


@dataclass
class CampaignConfig:
    spec: SubsystemSpec = field(default_factory=SubsystemSpec)
    rules: list[AnomalyRule] | None = None
    adapter: list[str] | None = None
    space_overrides: dict = field(default_factory=dict)
    sa: SaConfig = field(default_factory=SaConfig)
    detection: DetectionPolicy = field(default_factory=DetectionPolicy)
    counters: tuple[str, ...] = DEFAULT_COUNTERS
    output_dir: Path = Path("out")
    duration_s: int = 30
    adapter_timeout_s: float = 120.0
    source: Path | None = None

    def __post_init__(self):
        if (self.rules is None) == (self.adapter is None):
            raise ConfigError("exactly one of 'rules' (simulator mode) or 'adapter' (external mode) must be set")
        if self.adapter is not None and not self.adapter:
            raise ConfigError("field 'adapter': empty command")
        if self.duration_s < 1:
            raise ConfigError("field 'duration_s': must be >= 1")
        if self.adapter_timeout_s <= 0:
            raise ConfigError("field 'adapter_timeout_s': must be > 0")
        unknown = [c for c in self.counters if c not in ALL_COUNTERS]
        if unknown:
            raise ConfigError(f"field 'counters': unknown counter(s) {unknown}; known: {list(ALL_COUNTERS)}")

    @property
    def mode(self) -> str:
        return "simulator" if self.rules is not None else "adapter"

    @property
    def seed(self) -> int:
        return self.sa.seed

    def space(self) -> SearchSpace:
        base = SearchSpace(request_vector_len_n=self.spec.request_vector_len)
        return SearchSpace.from_dict(self.space_overrides, base=base)

    def with_overrides(self, seed: int | None = None, budget: int | None = None,
                       output_dir: str | Path | None = None) -> "CampaignConfig":
        sa = self.sa
        if seed is not None:
            sa = replace(sa, seed=seed)
        if budget is not None:
            sa = replace(sa, eval_budget=budget)
        out = Path(output_dir).resolve() if output_dir is not None else self.output_dir
        return replace(self, sa=sa, output_dir=out)

    def resolved(self) -> dict:
        """Self-contained form: spec and rules are inlined, paths made absolute."""
        sa = asdict(self.sa)
        seed = sa.pop("seed")
        return {
            "spec": self.spec.to_dict(),
            "rules": None if self.rules is None else [r.to_dict() for r in self.rules],
            "adapter": self.adapter,
            "space": self.space_overrides,
            "sa": sa,
            "detection": asdict(self.detection),
            "counters": list(self.counters),
            "output_dir": str(self.output_dir),
            "seed": seed,
            "duration_s": self.duration_s,
            "adapter_timeout_s": self.adapter_timeout_s,
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.resolved()).encode()).hexdigest()

    def manifest(self, package_version: str) -> dict:
        return {
            "manifest_version": 1,
            "package_version": package_version,
            "config_sha256": self.digest(),
            "seed": self.seed,
            "config": self.resolved(),
        }


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _where(path: Path, text: str, key: str) -> str:
    line = _line_of(text, key.split(".")[-1])
    return f"{path}:{line}" if line else str(path)


def _sub_dataclass(cls, data: Any, name: str, defaults=None):
    if not isinstance(data, dict):
        raise ConfigError(f"field {name!r}: expected an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"field '{name}.{key}': unknown key; expected one of {sorted(known)}")
    base = asdict(defaults) if defaults is not None else {}
    try:
        return cls(**{**base, **data})
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"field {name!r}: {exc}") from exc


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (base / p).resolve()


def config_from_dict(data: dict, base_dir: Path, source: Path | None = None) -> CampaignConfig:
    """Build a config from parsed JSON; relative paths resolve against ``base_dir``."""
    if not isinstance(data, dict):
        raise ConfigError("top level must be a JSON object")
    if "config" in data and "config_sha256" in data:
        data = data["config"]  # a manifest from an earlier run
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown}; expected a subset of {list(CONFIG_KEYS)}")

    spec_val = data.get("spec")
    try:
        if spec_val is None:
            spec = SubsystemSpec()
        elif isinstance(spec_val, dict):
            spec = SubsystemSpec.from_dict(spec_val)
        else:
            spec = SubsystemSpec.from_dict(_load_json(_resolve(base_dir, spec_val)))
    except ValidationError as exc:
        raise ConfigError(f"field 'spec': {exc}") from exc

    rules = None
    rules_val = data.get("rules")
    if rules_val is not None:
        try:
            if isinstance(rules_val, list):
                rules = [AnomalyRule.from_dict(r) for r in rules_val]
            else:
                rules = load_rules(_resolve(base_dir, rules_val))
        except ValidationError as exc:
            raise ConfigError(f"field 'rules': {exc}") from exc

    adapter = data.get("adapter")
    if isinstance(adapter, str):
        adapter = shlex.split(adapter)
    elif adapter is not None and not (isinstance(adapter, list) and all(isinstance(a, str) for a in adapter)):
        raise ConfigError("field 'adapter': expected a command string or a list of strings")

    space = data.get("space") or {}
    if not isinstance(space, dict):
        raise ConfigError("field 'space': expected an object of search-space overrides")

    sa_data = dict(data.get("sa") or {})
    if "seed" in sa_data:
        raise ConfigError("field 'sa.seed': set the seed at the top level")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("field 'seed': expected a non-negative integer")
    sa = _sub_dataclass(SaConfig, {**sa_data, "seed": seed}, "sa")
    detection = _sub_dataclass(DetectionPolicy, data.get("detection") or {}, "detection")

    counters = data.get("counters", list(DEFAULT_COUNTERS))
    if not isinstance(counters, list):
        raise ConfigError("field 'counters': expected a list of counter ids")

    cfg = CampaignConfig(
        spec=spec,
        rules=rules,
        adapter=adapter,
        space_overrides=space,
        sa=sa,
        detection=detection,
        counters=tuple(counters),
        output_dir=_resolve(base_dir, data.get("output_dir", "out")),
        duration_s=data.get("duration_s", 30),
        adapter_timeout_s=float(data.get("adapter_timeout_s", 120.0)),
        source=source,
    )
    try:
        cfg.space()
    except ValidationError as exc:
        raise ConfigError(f"field 'space': {exc}") from exc
    return cfg


def load_config(path: str | Path) -> CampaignConfig:
    path = Path(path)
    data = _load_json(path)  # FileNotFoundError / ValidationError carry the path
    text = path.read_text()
    try:
        return config_from_dict(data, path.resolve().parent, source=path)
    except ConfigError as exc:
        msg = str(exc)
        key = msg.split("'")[1] if msg.startswith("field '") else ""
        where = _where(path, text, key) if key else str(path)
        raise ConfigError(f"{where}: {msg}") from exc

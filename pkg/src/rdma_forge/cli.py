"""Command-line front end.

Exit status: 0 when nothing anomalous was found, 2 when anomalies (or witnesses)
were found, 1 on any error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__, data_path
from .adapter import AdapterTester
from .config import ConfigError, load_config
from .monitor import detect, measure_stable
from .report import load_anomalies, stable_mfs, write_artifacts
from .search import Monitor, run_campaign
from .simulator import SimulatorTester, _load_json, load_rules, load_spec, save_rules, SubsystemSpec
from .workload import SearchSpace, ValidationError, WorkloadPoint, check_space_against_mfs, validate

EXIT_CLEAN, EXIT_ERROR, EXIT_ANOMALY = 0, 1, 2
LOG_ENV = "COLLIE_FORGE_LOG"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("rdma_forge")


def _setup_logging() -> None:
    name = os.environ.get(LOG_ENV, "error").strip().lower()
    level = LOG_LEVELS.get(name)
    logging.basicConfig(level=level or logging.ERROR, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    if level is None:
        log.error("%s=%r is not one of %s; using error", LOG_ENV, name, sorted(LOG_LEVELS))


def _print_json(data) -> None:
    print(json.dumps(data, indent=2))


def cmd_search(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, budget=args.budget, output_dir=args.out)
    space = cfg.space()
    monitor = Monitor(cfg.spec, cfg.detection)
    if cfg.mode == "simulator":
        tester = SimulatorTester(cfg.spec, tuple(cfg.rules), space)
        result = run_campaign(cfg.sa, space, tester, monitor, cfg.counters)
    else:
        cwd = str(Path(cfg.source).resolve().parent) if cfg.source else None
        with AdapterTester(cfg.adapter, cfg.duration_s, cfg.adapter_timeout_s, cwd=cwd) as tester:
            result = run_campaign(cfg.sa, space, tester, monitor, cfg.counters)
    paths = write_artifacts(cfg.output_dir, result, cfg.spec.name, cfg.manifest(__version__))
    print(f"{len(result.records)} anomalies in {result.evals} evaluations "
          f"(+{result.mfs_evals} MFS evaluations); artifacts in {paths['anomalies'].parent}")
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ANOMALY if result.records else EXIT_CLEAN


def cmd_replay(args) -> int:
    spec = load_spec(args.spec)
    rules = load_rules(args.rules) if args.rules else []
    try:
        point = WorkloadPoint.from_dict(_load_json(args.point))
    except ValidationError as exc:
        raise ValidationError(f"{args.point}: {exc}") from exc
    space = SearchSpace(request_vector_len_n=spec.request_vector_len)
    validate(point, space)
    tester = SimulatorTester(spec, tuple(rules), space)
    monitor = Monitor(spec)
    m = measure_stable(point, tester, monitor.policy, args.seed)
    verdict = detect(m, spec, monitor.policy)
    _print_json({"measurement": m.to_dict(), "verdict": verdict or "none"})
    return EXIT_ANOMALY if verdict else EXIT_CLEAN


def cmd_check_space(args) -> int:
    data = _load_json(args.space)
    if not isinstance(data, dict):
        raise ValidationError(f"{args.space}: expected a search-space object")
    try:
        space = SearchSpace.from_dict(data)
    except ValidationError as exc:
        raise ValidationError(f"{args.space}: {exc}") from exc
    anomalies = stable_mfs(load_anomalies(args.anomalies))
    hits = check_space_against_mfs(space, anomalies)
    _print_json({"witnesses": [{"anomaly_id": aid, "point": p.to_dict()} for aid, p in hits]})
    return EXIT_ANOMALY if hits else EXIT_CLEAN


def cmd_gen_defaults(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SubsystemSpec()
    space = SearchSpace(request_vector_len_n=spec.request_vector_len)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    save_rules(load_rules(data_path("reference_rules.json")), out / "rules.json")
    (out / "space.json").write_text(json.dumps(space.to_dict(), indent=2) + "\n")
    (out / "pause_point.json").write_text(data_path("ud_send_pause_point.json").read_text())
    config = {"spec": "spec.json", "rules": "rules.json", "space": {}, "seed": 0, "output_dir": "out"}
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    print(f"wrote spec.json, rules.json, space.json, pause_point.json and config.json to {out}")
    return EXIT_CLEAN


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rdma-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a counter-guided search campaign")
    p.add_argument("--config", required=True, help="campaign config JSON (or a manifest.json from a run)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--budget", type=int, help="override the evaluation budget")
    p.add_argument("--out", help="override the output directory")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("replay", help="measure one workload point and print the verdict")
    p.add_argument("--point", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--rules")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("check-space", help="check a restricted search space against known anomalies")
    p.add_argument("--space", required=True)
    p.add_argument("--anomalies", required=True)
    p.set_defaults(func=cmd_check_space)

    p = sub.add_parser("gen-defaults", help="write the reference spec, rule library, space and a config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_defaults)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, OSError) as exc:
        kind = "config error" if isinstance(exc, ConfigError) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

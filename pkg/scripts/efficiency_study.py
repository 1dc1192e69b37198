"""Compare the counter-guided campaign with uniform random search on the reference rules.

For each seed both searches get the same evaluation budget.  Prints, per injected
rule, how often it was found and the median evaluation index of its discovery.

    python3 scripts/efficiency_study.py [--seeds 10] [--budget 2000]
"""

import argparse
import statistics
import time

import rdma_forge as rf
from rdma_forge.search import Monitor
from rdma_forge.simulator import dominant_rule


def discoveries(result, rules) -> dict[int, int]:
    out: dict[int, int] = {}
    for rec in result.records:
        rule = None if rec.unstable else dominant_rule(rec.discovery_point, rules)
        if rule is not None:
            out.setdefault(rule.id, rec.discovery_eval)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--budget", type=int, default=2000)
    args = ap.parse_args()

    spec = rf.reference_spec()
    space = rf.reference_space(spec)
    rules = tuple(rf.reference_rules())
    monitor = Monitor(spec)
    runs = {"campaign": [], "random": []}
    start = time.perf_counter()
    for seed in range(args.seeds):
        cfg = rf.SaConfig(seed=seed, eval_budget=args.budget)
        runs["campaign"].append(discoveries(
            rf.run_campaign(cfg, space, rf.SimulatorTester(spec, rules, space), monitor), rules))
        runs["random"].append(discoveries(
            rf.search_random(cfg, space, rf.SimulatorTester(spec, rules, space), monitor), rules))
    print(f"{args.seeds} seeds, budget {args.budget}, {time.perf_counter() - start:.1f} s\n")

    missing = args.budget + 1
    print(f"{'rule':>6} {'#feat':>5} | {'campaign found':>14} {'median':>8} | {'random found':>12} {'median':>8}")
    for rule in rules:
        cells = []
        for name in ("campaign", "random"):
            evals = [d.get(rule.id, missing) for d in runs[name]]
            found = sum(e < missing for e in evals)
            cells.append(f"{found:>{14 if name == 'campaign' else 12}}/{args.seeds} {statistics.median(evals):>6g}")
        print(f"{'#' + str(rule.id):>6} {len(rule.constrained_features):>5} | {cells[0]} | {cells[1]}")
    for name, found in runs.items():
        counts = [len(d) for d in found]
        print(f"\n{name}: rules found per seed {counts}, median {statistics.median(counts)}")


if __name__ == "__main__":
    main()

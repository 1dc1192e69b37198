"""Generate the reference inputs, run one simulated campaign and print the report.

    python3 scripts/run_demo.py [--out DIR] [--seed N]
"""

import argparse
import tempfile
from pathlib import Path

from rdma_forge.cli import main


def run(out: Path, seed: int) -> int:
    assert main(["gen-defaults", "--out", str(out)]) == 0
    code = main(["search", "--config", str(out / "config.json"), "--seed", str(seed)])
    print((out / "out" / "report.md").read_text())
    print(f"exit code {code}; artifacts in {out / 'out'}")
    return code


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = args.out or Path(tempfile.mkdtemp(prefix="rdma-forge-demo-"))
    out.mkdir(parents=True, exist_ok=True)
    run(out, args.seed)

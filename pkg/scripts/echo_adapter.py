#!/usr/bin/env python3
"""Minimal external tester: answers every request with one canned measurement.

    echo_adapter.py [--measurement FILE] [--error-after N] [--hang-after N]

Used to smoke-test the adapter protocol without a real traffic engine.
"""

import argparse
import json
import sys
import time

CANNED = {
    "achieved_bps": 200e9,
    "achieved_pps": 6.1e6,
    "pause_duration_ratio": 0.0,
    "perf_counters": {"rx_bps": 200e9, "tx_bps": 200e9, "tx_pps": 6.1e6},
    "diag_counters": {"icm_cache_miss": 10.0, "pcie_backpressure": 1000.0, "recv_wqe_cache_miss": 50.0},
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--measurement", help="JSON file with the measurement to return")
    ap.add_argument("--error-after", type=int, default=None, help="reply with an error from request N+1 on")
    ap.add_argument("--hang-after", type=int, default=None, help="stop answering after N requests")
    args = ap.parse_args()
    canned = CANNED
    if args.measurement:
        with open(args.measurement) as fh:
            canned = json.load(fh)

    served = 0
    for line in sys.stdin:
        request = json.loads(line)
        assert "point" in request and "duration_s" in request
        if args.hang_after is not None and served >= args.hang_after:
            time.sleep(3600)
        if args.error_after is not None and served >= args.error_after:
            reply = {"error": "traffic engine lost the link"}
        else:
            reply = {"measurement": canned}
        served += 1
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()

"""Run every registered scenario over a range of seeds and tabulate outcomes.

    python scripts/run_adversary_matrix.py --seeds 100 [--json out.json]

Exits 1 if any run fails its verdict.
"""

import argparse
import json
import sys
import time
from collections import Counter

from grimlock.harness import SCENARIOS, build_scenario, run_scenario


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=100, help="seeds 0..N-1 per scenario")
    ap.add_argument("--scenario", action="append", choices=sorted(SCENARIOS),
                    help="restrict to these scenarios (repeatable)")
    ap.add_argument("--json", help="also write the matrix as JSON here")
    args = ap.parse_args(argv)

    names = args.scenario or sorted(SCENARIOS)
    matrix = {}
    failed = 0
    print(f"{'scenario':<18}{'pass':>6}{'fail':>6}{'secs':>8}  outcomes")
    for name in names:
        outcomes: Counter = Counter()
        passes = fails = 0
        start = time.perf_counter()
        for seed in range(args.seeds):
            r = run_scenario(build_scenario(name, seed))
            outcomes.update(r.outcomes.values())
            if r.passed:
                passes += 1
            else:
                fails += 1
                print(f"  {name} seed={seed} FAIL: {'; '.join(r.failures[:3])}", file=sys.stderr)
        secs = time.perf_counter() - start
        failed += fails
        matrix[name] = {"pass": passes, "fail": fails, "seconds": round(secs, 3),
                        "outcomes": dict(sorted(outcomes.items()))}
        summary = ", ".join(f"{k}={v}" for k, v in sorted(outcomes.items()))
        print(f"{name:<18}{passes:>6}{fails:>6}{secs:>8.2f}  {summary}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(matrix, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())

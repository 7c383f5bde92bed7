"""Run the end-to-end LQ oracle and print a summary table.

    python3 scripts/run_lq_oracle.py [--paths M] [--seed S] [--parts optimal,variant,cost]
"""

import argparse
import time

from dissipative_smp.oracle import LQOracleSettings, run_lq_oracle
from dissipative_smp.runtime import tune_allocator


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--parts", default="optimal,variant,cost")
    ap.add_argument("--csv", help="write the check table here")
    args = ap.parse_args()
    tune_allocator()
    start = time.time()
    settings = LQOracleSettings(M=args.paths, seed=args.seed)

    def log(check):
        print(f"{time.time() - start:8.1f}s  {'PASS' if check.passed else 'FAIL'}  {check.name:34s} "
              f"value={check.value:+.6g} target={check.target:+.6g} tol={check.tolerance:.3g}", flush=True)

    result = run_lq_oracle(settings, log=log, parts=args.parts.split(","))
    if args.csv:
        result.to_csv(args.csv)
    print("all checks passed" if result.passed else "some checks failed")


if __name__ == "__main__":
    main()

"""SMP verdict counts for LQ feedback gains around the Riccati gain.

    python3 scripts/smp_scan.py [--paths M] [--T T] [--h H]

Only the Riccati gain should give zero violations.
"""

import argparse

import numpy as np

from dissipative_smp.controls import LinearFeedback
from dissipative_smp.models import builtin_model, riccati_gain
from dissipative_smp.runtime import tune_allocator
from dissipative_smp.sde import TimeGrid
from dissipative_smp.smp import check_smp


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--T", type=float, default=12.0)
    ap.add_argument("--h", type=float, default=5e-3)
    ap.add_argument("--seed", type=int, default=5)
    args = ap.parse_args()
    tune_allocator()
    a, r = -1.0, 0.5
    model = builtin_model("lq_scalar", {"a": a, "sigma0": 0.5})
    grid = TimeGrid(args.T, args.h, r, tail_tolerance=np.exp(-r * args.T) * 1.0001)
    star = riccati_gain(a, r)
    print(f"P* = {star:.6f}")
    for gain in (0.0, 0.5 * star, star, 1.5 * star, 3.0 * star):
        rep = check_smp(model, LinearFeedback([[-gain]]), (0.5, 1.0, 2.0), args.paths, args.seed, grid)
        c = rep.counts()
        print(f"gain {gain:.4f}: violated {c['violated']:2d}  inconclusive {c['inconclusive']:2d}  "
              f"satisfied {c['satisfied']:2d}  worst lhs {rep.worst.lhs:+.4f}")


if __name__ == "__main__":
    main()

"""Expansion orders of the spike variation from an orders config.

    python3 scripts/expansion_orders.py [configs/logistic_orders.toml] [--paths M]
"""

import argparse
import time

from dissipative_smp.config import load_config
from dissipative_smp.runtime import tune_allocator
from dissipative_smp.variation import estimate_expansion_orders

EXPECTED = {"xi": "k", "y": "k", "z": "2k", "eta": "2k", "zeta": "> 2k"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default="configs/logistic_orders.toml")
    ap.add_argument("--paths", type=int)
    ap.add_argument("--csv", help="write the order report here")
    args = ap.parse_args()
    tune_allocator()
    cfg = load_config(args.config)
    model = cfg.build_model()
    grid = cfg.build_grid(model)
    M = args.paths or cfg.run.paths
    start = time.time()
    rep = estimate_expansion_orders(model, cfg.build_control(model), cfg.build_spike(), cfg.spike.eps,
                                    cfg.spike.k, M, cfg.run.seed, grid)
    print(f"{model.name}, k = {rep.k}, M = {M}, {time.time() - start:.0f}s")
    print(f"{'quantity':8s} {'slope':>8s} {'95% CI':>20s}  expected")
    for q, f in rep.fits.items():
        print(f"{q:8s} {f.slope:8.3f} [{f.ci_low:7.3f}, {f.ci_high:7.3f}]  {EXPECTED[q]}")
    if args.csv:
        rep.to_csv(args.csv)


if __name__ == "__main__":
    main()

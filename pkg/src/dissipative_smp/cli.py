"""Config-driven experiment runner.

    dissipative-smp <subcommand> --config run.toml [--out DIR] [--workers K] [--seed-override N]

Every run writes its CSVs, a verbatim copy of the config (config.toml) and
manifest.json into the output directory. The manifest records the
resolved config, seed, versions, artifacts and wall time; on failure it
names the stage and the error. Exit status: 0 success, 1 pipeline or
config error, 2 usage error, 3 oracle checks failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from .adjoint import check_duality_yp, check_duality_zp, solve_first_adjoint, write_identity_csv
from .config import SUBCOMMANDS, ExperimentConfig, load_config
from .errors import ConfigParseError, SMPError
from .models import discount_details, monotonicity_csv, probe_joint_monotonicity
from .oracle import LQOracleSettings, run_lq_oracle
from .runtime import tune_allocator
from .sde import estimate_cost, fmt, moment_envelope, simulate_state, weighted_moment_profile
from .second_adjoint import estimate_P, hessian_H, spike_duality_ladder, write_estimates_csv
from .smp import check_smp
from .variation import estimate_expansion_orders, simulate_variations

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CHECKS = 0, 1, 2, 3


class Run:
    """Output directory, current stage and artifact list of one invocation."""

    def __init__(self, out: str):
        self.out = out
        self.stage = "setup"
        self.artifacts = []
        os.makedirs(out, exist_ok=True)

    def path(self, name: str) -> str:
        self.artifacts.append(name)
        return os.path.join(self.out, name)

    def enter(self, stage: str):
        self.stage = stage
        print(f"[{stage}]", flush=True)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _export_ids(cfg: ExperimentConfig, M: int) -> list:
    return list(range(min(cfg.output.export_paths, M)))


def _write_ladder(run: Run, ladder):
    _write_rows(run.path("spike_duality.csv"), ["eps", "residual", "std_err", "residual_over_eps"],
                [[fmt(e), fmt(r), fmt(s), fmt(q)] for e, r, s, q in
                 zip(ladder.eps, ladder.residuals, ladder.std_errors, ladder.residual_over_eps)])


def _setup(cfg: ExperimentConfig, run: Run):
    run.enter("model")
    model = cfg.build_model()
    run.enter("discount")
    grid = cfg.build_grid(model)
    return model, grid


def cmd_probe(cfg, run, workers):
    run.enter("model")
    model = cfg.build_model()
    run.enter("probe")
    reports = [
        probe_joint_monotonicity(model, p, seed=cfg.run.seed, samples=cfg.probe.samples,
                                 grid_points=cfg.probe.grid_points)
        for p in cfg.probe.p_values
    ]
    with open(run.path("monotonicity.csv"), "w", newline="") as fh:
        fh.write(monotonicity_csv(reports))
    run.enter("discount")
    rec = discount_details(model, reports, seed=cfg.run.seed, samples=cfg.probe.samples)
    rows = [[fmt(p), fmt(c)] for p, c in sorted(rec.constants.items())]
    _write_rows(run.path("discount_constants.csv"), ["p", "c_p"], rows)
    _write_rows(run.path("discount.csv"), ["r", "c_max", "binding_index", "floor_used"],
                [[fmt(rec.r), fmt(rec.c_max), "" if rec.binding_index is None else fmt(rec.binding_index),
                  int(rec.floor_used)]])
    for rep in reports:
        print(f"c_{rep.p:g} = {rep.c_p_estimate:.6g}")
    print(f"recommended r = {rec.r:.6g}")
    return EXIT_OK, {"recommended_r": rec.r}


def cmd_simulate(cfg, run, workers):
    model, grid = _setup(cfg, run)
    run.enter("simulate")
    bundle = simulate_state(model, cfg.build_control(model), grid, cfg.run.paths, cfg.run.seed, workers=workers)
    bundle.to_csv(run.path("paths.csv"), _export_ids(cfg, bundle.paths_M))
    run.enter("moments")
    times, mean, se = weighted_moment_profile(bundle, grid.discount_r)
    env = moment_envelope(model, seed=cfg.run.seed)
    bound = env.weighted(times, grid.discount_r)
    _write_rows(run.path("moments.csv"), ["t", "weighted_second_moment", "std_err", "envelope"],
                [[fmt(t), fmt(m), fmt(s), fmt(b)] for t, m, s, b in zip(times, mean, se, bound)])
    run.enter("cost")
    cost = estimate_cost(model, bundle)
    _write_rows(run.path("cost.csv"), ["value", "std_err", "paths_M", "tail_bound"],
                [[fmt(cost.value), fmt(cost.std_error), cost.paths_M, fmt(cost.tail_bound)]])
    below = bool(np.all(mean <= bound + 3.0 * se))
    print(f"cost = {cost.value:.6g} +- {cost.std_error:.2g}; moments below envelope: {below}")
    return EXIT_OK, {"cost": cost.value, "moments_below_envelope": below}


def cmd_orders(cfg, run, workers):
    model, grid = _setup(cfg, run)
    run.enter("orders")
    rep = estimate_expansion_orders(model, cfg.build_control(model), cfg.build_spike(), cfg.spike.eps, cfg.spike.k,
                                    cfg.run.paths, cfg.run.seed, grid, workers=workers)
    rep.to_csv(run.path("orders.csv"))
    slopes = {q: f.slope for q, f in rep.fits.items()}
    for q, f in rep.fits.items():
        print(f"{q}: slope {f.slope:.4g} [{f.ci_low:.4g}, {f.ci_high:.4g}]")
    return EXIT_OK, {"slopes": slopes}


def _bundle_and_adjoint(cfg, run, model, grid, workers):
    run.enter("simulate")
    bundle = simulate_state(model, cfg.build_control(model), grid, cfg.run.paths, cfg.run.seed, workers=workers)
    run.enter("adjoint")
    adjoint = solve_first_adjoint(model, bundle, cfg.build_basis(), cfg.adjoint.truncation, cfg.adjoint.picard_sweeps)
    return bundle, adjoint


def cmd_adjoint(cfg, run, workers):
    model, grid = _setup(cfg, run)
    bundle, adjoint = _bundle_and_adjoint(cfg, run, model, grid, workers)
    adjoint.to_csv(run.path("adjoint_paths.csv"), _export_ids(cfg, bundle.paths_M))
    _write_rows(run.path("adjoint_fit.csv"), ["step", "t", "r2_mean", "r2_q", "condition"],
                [[k, fmt(k * grid.step_h), fmt(adjoint.r2_mean[k]), fmt(adjoint.r2_q[k]), fmt(adjoint.condition[k])]
                 for k in range(adjoint.truncation_step)])
    run.enter("duality")
    var = simulate_variations(model, bundle, cfg.build_spike(), store=False, adjoint=adjoint)
    reps = [check_duality_yp(model, bundle, adjoint, var), check_duality_zp(model, bundle, adjoint, var)]
    write_identity_csv(run.path("identities.csv"), reps)
    for rep in reps:
        print(f"{rep.name}: lhs {rep.lhs:.6g} rhs {rep.rhs:.6g} diff {rep.diff:.3g} se {rep.std_err:.3g} {rep.verdict}")
    return EXIT_OK, {rep.name: rep.verdict for rep in reps}


def cmd_second_adjoint(cfg, run, workers):
    model, grid = _setup(cfg, run)
    bundle, adjoint = _bundle_and_adjoint(cfg, run, model, grid, workers)
    run.enter("second-adjoint")
    hess = hessian_H(model, bundle, adjoint)
    sa = cfg.second_adjoint
    steps = [grid.index(t) for t in sa.times]
    ests = estimate_P(model, bundle, hess, steps, mode=sa.mode, basis=cfg.build_basis(),
                      inner_paths=sa.inner_paths, outer_paths=sa.outer_paths, seed=cfg.run.seed)
    write_estimates_csv(run.path("second_adjoint.csv"), ests)
    for est in ests:
        print(f"P(t={est.t:g}) = {np.array2string(est.matrix, precision=6)}")
    run.enter("spike-duality")
    ladder = spike_duality_ladder(model, bundle, hess, cfg.build_spike(), cfg.spike.eps, cfg.build_basis())
    _write_ladder(run, ladder)
    print(f"spike duality residual / eps decreasing: {ladder.decreasing}")
    return EXIT_OK, {"spike_ratio_decreasing": ladder.decreasing}


def cmd_smp_check(cfg, run, workers):
    model, grid = _setup(cfg, run)
    run.enter("smp-check")
    rep = check_smp(model, cfg.build_control(model), cfg.smp.times, cfg.run.paths, cfg.run.seed, grid,
                    tolerance=cfg.smp.tolerance, control_points=cfg.smp_points(model), basis=cfg.build_basis(),
                    picard_sweeps=cfg.adjoint.picard_sweeps, workers=workers)
    rep.to_csv(run.path("smp_report.csv"))
    text = rep.summary_text()
    with open(run.path("smp_summary.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_OK, {"verdicts": rep.counts()}


def oracle_settings(cfg: ExperimentConfig, model, grid, workers) -> LQOracleSettings:
    if model.name != "lq_scalar":
        raise ConfigParseError("oracle-lq needs model lq_scalar", field="model.name")
    p = model.params
    return LQOracleSettings(
        a=float(p.get("a", -1.0)), sigma0=float(p.get("sigma0", 0.5)), x0=float(p.get("x0", 1.0)),
        r=grid.discount_r, T=grid.horizon_T, h=grid.step_h, tail_tolerance=grid.tail_tolerance,
        M=cfg.run.paths, seed=cfg.run.seed, smp_times=tuple(cfg.smp.times), control_points=cfg.smp_points(model),
        slope_time=cfg.oracle.slope_time, spike=cfg.build_spike(), eps_ladder=tuple(cfg.spike.eps),
        variant_sigma_u=cfg.oracle.variant_sigma_u, cost_h=cfg.oracle.cost_h,
        cost_halvings=cfg.oracle.cost_halvings, basis=cfg.build_basis(), workers=workers,
    )


def cmd_oracle_lq(cfg, run, workers):
    model, grid = _setup(cfg, run)
    settings = oracle_settings(cfg, model, grid, workers)
    checks, reports = [], {}
    for part in ("optimal", "variant", "cost"):
        run.enter(f"oracle-{part}")
        res = run_lq_oracle(settings, log=lambda c: None, parts=(part,))
        checks += res.checks
        reports.update(res.reports)
    result = type(res)(checks, reports)
    result.to_csv(run.path("oracle_lq.csv"))
    reports["smp_optimal"].to_csv(run.path("smp_optimal.csv"))
    reports["smp_zero"].to_csv(run.path("smp_zero.csv"))
    write_estimates_csv(run.path("second_adjoint.csv"), reports["second_adjoint"])
    write_identity_csv(run.path("identities.csv"), [reports["duality_yp"], reports["duality_zp"]])
    _write_ladder(run, reports["spike_ladder"])
    print("\n".join(result.summary_lines()))
    print("oracle-lq: " + ("all checks passed" if result.passed else "some checks failed"))
    return (EXIT_OK if result.passed else EXIT_CHECKS), {"checks_passed": result.passed}


COMMANDS = {
    "probe": cmd_probe,
    "simulate": cmd_simulate,
    "orders": cmd_orders,
    "adjoint": cmd_adjoint,
    "second-adjoint": cmd_second_adjoint,
    "smp-check": cmd_smp_check,
    "oracle-lq": cmd_oracle_lq,
}
assert set(COMMANDS) == set(SUBCOMMANDS)


def _versions() -> dict:
    import scipy

    return {"package": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _manifest(run: Run, args, cfg: Optional[ExperimentConfig], status: str, start: float, **extra) -> dict:
    m = {
        "status": status,
        "subcommand": args.subcommand,
        "config_file": os.path.abspath(args.config),
        "seed": cfg.run.seed if cfg else None,
        "workers": args.workers if args.workers is not None else (cfg.run.workers if cfg else None),
        "config": cfg.to_dict() if cfg else None,
        "versions": _versions(),
        "artifacts": sorted(set(run.artifacts)),
        "wall_time_s": time.time() - start,
    }
    m.update(extra)
    return m


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dissipative-smp", description=__doc__.split("\n\n")[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="experiment config (TOML)")
    ap.add_argument("--out", help="output directory (default: [output] dir of the config)")
    ap.add_argument("--workers", type=int, help="worker count (default: [run] workers)")
    ap.add_argument("--seed-override", type=int, help="replace [run] seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tune_allocator()
    start = time.time()
    cfg = None
    try:
        cfg = load_config(args.config)
    except ConfigParseError as exc:
        out = args.out or "."
        run = Run(out)
        run.stage = "config"
        _dump(run, _manifest(run, args, None, "failed", start, stage="config", error=f"ConfigParseError: {exc}"))
        print(f"error [config]: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed_override is not None:
        cfg.run.seed = args.seed_override
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    workers = args.workers if args.workers is not None else cfg.run.workers
    run = Run(args.out or cfg.output.dir)
    with open(run.path("config.toml"), "w", encoding="utf-8") as fh:
        fh.write(cfg.text)
    try:
        code, summary = COMMANDS[args.subcommand](cfg, run, workers)
    except (SMPError, ValueError, FloatingPointError, MemoryError) as exc:
        name = type(exc).__name__
        _dump(run, _manifest(run, args, cfg, "failed", start, stage=run.stage, error=f"{name}: {exc}"))
        print(f"error [{run.stage}]: {name}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status = "ok" if code == EXIT_OK else "checks_failed"
    _dump(run, _manifest(run, args, cfg, status, start, summary=summary))
    return code


def _dump(run: Run, manifest: dict):
    with open(os.path.join(run.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())

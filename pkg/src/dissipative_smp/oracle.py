"""Closed forms for the scalar LQ problem and the end-to-end LQ check.

For dX = (a X + u) dt + sigma0 dW with running cost x^2 + u^2 and discount
r, the optimal feedback is u = -P* x with P* the positive root of
P^2 + (r - 2a) P - 1 = 0. Along any path the first adjoint is
p_t = -2 P* X_t, and the second adjoint (with D^2 H = -2, D_x b = a) is

    P_t = -2 (1 - e^{-(r - 2a)(T - t)}) / (r - 2a)

on a horizon T. ``run_lq_oracle`` runs every LQ check through the public
pipeline and returns one OracleCheck per item.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import check_duality_yp, check_duality_zp, solve_first_adjoint
from .controls import ConstantControl, LinearFeedback
from .models import builtin_model, riccati_gain
from .regression import RegressionBasis
from .sde import TimeGrid, estimate_cost, fmt, simulate_state
from .second_adjoint import estimate_P, hessian_H, spike_duality_ladder
from .smp import check_smp
from .variation import SpikeSpec, simulate_variations

ORACLE_FIELDS = ("check", "value", "target", "tolerance", "passed")


def lq_second_adjoint(a: float, r: float, T: float, t) -> np.ndarray:
    """Closed-form scalar P_t on the horizon T."""
    k = r - 2.0 * a
    return -2.0 * (1.0 - np.exp(-k * (T - np.asarray(t, dtype=float)))) / k


def lq_cost(a: float, gain: float, sigma0: float, x0: float, r: float, T: float = math.inf) -> float:
    """E int_0^T e^{-rt} (X^2 + u^2) dt under u = -gain X.

    X is an Ornstein-Uhlenbeck process with rate gain - a, so E X_t^2 =
    x0^2 e^{kt} + sigma0^2 (1 - e^{kt}) / (-k) with k = 2 (a - gain).
    """
    k = 2.0 * (a - gain)
    if k >= 0:
        raise ValueError("closed form needs gain > a")
    stat = sigma0**2 / (-k)
    trans = x0**2 - stat
    if math.isinf(T):
        return (1.0 + gain**2) * (trans / (r - k) + stat / r)
    return (1.0 + gain**2) * (trans * -math.expm1((k - r) * T) / (r - k) + stat * -math.expm1(-r * T) / r)


@dataclass(frozen=True)
class LQOracleSettings:
    """Inputs of the end-to-end LQ check.

    ``variant_sigma_u`` is the control coefficient of the diffusion used
    by the duality checks. ``cost_h`` is the coarsest step of the cost
    ladder, halved ``cost_halvings`` times on common Brownian paths.
    """

    a: float = -1.0
    sigma0: float = 0.5
    x0: float = 1.0
    r: float = 0.5
    T: float = 12.0
    h: float = 2e-3
    tail_tolerance: float = 2.5e-3
    M: int = 100_000
    seed: int = 0
    smp_times: tuple = (0.5, 1.0, 2.0)
    control_points: Optional[np.ndarray] = None
    slope_time: float = 1.0
    slope_tolerance: float = 0.05
    spike: SpikeSpec = field(default_factory=lambda: SpikeSpec(1.0, 0.1, [1.0]))
    eps_ladder: tuple = (0.4, 0.2, 0.1, 0.05)
    variant_sigma_u: float = 0.5
    cost_h: float = 0.2
    cost_halvings: int = 3
    cost_factor: float = 1.7
    basis: RegressionBasis = RegressionBasis()
    workers: int = 1

    def params(self, sigma_u: float = 0.0) -> dict:
        return {"a": self.a, "sigma0": self.sigma0, "x0": self.x0, "sigma_u": sigma_u}

    def grid(self) -> TimeGrid:
        return TimeGrid(self.T, self.h, self.r, self.tail_tolerance)


@dataclass(frozen=True)
class OracleCheck:
    name: str
    value: float
    target: float
    tolerance: float
    passed: bool

    def __post_init__(self):
        for name in ("value", "target", "tolerance"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "passed", bool(self.passed))

    def csv_row(self) -> list:
        return [self.name, fmt(self.value), fmt(self.target), fmt(self.tolerance), int(self.passed)]


@dataclass
class LQOracleResult:
    checks: list
    reports: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ORACLE_FIELDS)
            for c in self.checks:
                w.writerow(c.csv_row())

    def summary_lines(self) -> list:
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: value={c.value:.6g} target={c.target:.6g} "
                f"tolerance={c.tolerance:.3g}" for c in self.checks]


def adjoint_slope(adjoint, bundle, k: int) -> float:
    """Least-squares slope of p_k on X_k (scalar state)."""
    x = bundle.state(k)
    p = adjoint.p(k, x, bundle.control_at(k, x))
    return float(np.polyfit(x[:, 0], p[:, 0], 1)[0])


def optimal_checks(s: LQOracleSettings, log=print) -> tuple:
    """SMP verdicts under u* and u = 0, the adjoint slope and the P closed form."""
    model = builtin_model("lq_scalar", s.params())
    grid = s.grid()
    gain = riccati_gain(s.a, s.r)
    checks, reports = [], {}
    optimal = LinearFeedback([[-gain]])
    bundle = simulate_state(model, optimal, grid, s.M, s.seed, workers=s.workers)
    adjoint = solve_first_adjoint(model, bundle, s.basis)
    rep = check_smp(model, optimal, s.smp_times, s.M, s.seed, grid, control_points=s.control_points,
                    basis=s.basis, bundle=bundle, adjoint=adjoint)
    reports["smp_optimal"] = rep
    checks.append(OracleCheck("smp_optimal_violations", len(rep.violations), 0, 0, not rep.violations))
    log(checks[-1])

    k = grid.index(s.slope_time)
    slope = adjoint_slope(adjoint, bundle, k)
    target = -2.0 * gain
    tol = s.slope_tolerance * abs(target)
    checks.append(OracleCheck("adjoint_slope", slope, target, tol, abs(slope - target) <= tol))
    log(checks[-1])

    hess = hessian_H(model, bundle, adjoint)
    steps = [grid.index(t) for t in s.smp_times]
    ests = estimate_P(model, bundle, hess, steps, basis=s.basis)
    reports["second_adjoint"] = ests
    for est in ests:
        target = float(lq_second_adjoint(s.a, s.r, s.T, est.t))
        tol = 3.0 * float(est.std_error_matrix[0, 0]) + 2.0 * s.h
        value = float(est.matrix[0, 0])
        checks.append(OracleCheck(f"second_adjoint_t={est.t:g}", value, target, tol, abs(value - target) <= tol))
        log(checks[-1])
    del bundle, adjoint, hess

    zero = ConstantControl([0.0])
    rep0 = check_smp(model, zero, s.smp_times, s.M, s.seed, grid, control_points=s.control_points,
                     basis=s.basis, workers=s.workers)
    reports["smp_zero"] = rep0
    checks.append(OracleCheck("smp_zero_control_violations", len(rep0.violations), 1, 0, len(rep0.violations) >= 1))
    log(checks[-1])
    return checks, reports


def variant_checks(s: LQOracleSettings, log=print) -> tuple:
    """Duality identities and the spike-duality ladder with control in the diffusion."""
    model = builtin_model("lq_scalar", s.params(s.variant_sigma_u))
    grid = s.grid()
    gain = riccati_gain(s.a, s.r)
    bundle = simulate_state(model, LinearFeedback([[-gain]]), grid, s.M, s.seed, workers=s.workers)
    adjoint = solve_first_adjoint(model, bundle, s.basis)
    var = simulate_variations(model, bundle, s.spike, store=False, adjoint=adjoint)
    checks, reports = [], {}
    for rep in (check_duality_yp(model, bundle, adjoint, var), check_duality_zp(model, bundle, adjoint, var)):
        reports[rep.name] = rep
        tol = 3.0 * rep.std_err + rep.tolerance
        checks.append(OracleCheck(rep.name, rep.diff, 0.0, tol, rep.verdict == "holds"))
        log(checks[-1])
    del var
    hess = hessian_H(model, bundle, adjoint)
    ladder = spike_duality_ladder(model, bundle, hess, s.spike, s.eps_ladder, s.basis)
    reports["spike_ladder"] = ladder
    checks.append(OracleCheck("spike_residual_over_eps_last", ladder.residual_over_eps[-1],
                              ladder.residual_over_eps[0], 0.0, ladder.decreasing))
    log(checks[-1])
    return checks, reports


def cost_checks(s: LQOracleSettings, log=print) -> tuple:
    """Error of estimate_cost against the closed form as h halves on common paths."""
    model = builtin_model("lq_scalar", s.params())
    gain = riccati_gain(s.a, s.r)
    exact = lq_cost(s.a, gain, s.sigma0, s.x0, s.r, s.T)
    errors = []
    for i in range(s.cost_halvings + 1):
        h = s.cost_h / 2**i
        grid = TimeGrid(s.T, h, s.r, s.tail_tolerance, noise_substeps=2 ** (s.cost_halvings - i))
        bundle = simulate_state(model, LinearFeedback([[-gain]]), grid, s.M, s.seed, workers=s.workers)
        errors.append(abs(estimate_cost(model, bundle, tail=False).value - exact))
    checks = []
    for i in range(s.cost_halvings):
        factor = errors[i] / errors[i + 1] if errors[i + 1] > 0 else math.inf
        checks.append(OracleCheck(f"cost_decay_h={s.cost_h / 2**i:g}", factor, s.cost_factor, 0.0,
                                  factor >= s.cost_factor))
        log(checks[-1])
    return checks, {"cost_errors": errors, "cost_exact": exact}


def run_lq_oracle(s: LQOracleSettings, log=print, parts: Sequence[str] = ("optimal", "variant", "cost")) -> LQOracleResult:
    runners = {"optimal": optimal_checks, "variant": variant_checks, "cost": cost_checks}
    checks, reports = [], {}
    for part in parts:
        c, r = runners[part](s, log)
        checks += c
        reports.update(r)
    return LQOracleResult(checks, reports)

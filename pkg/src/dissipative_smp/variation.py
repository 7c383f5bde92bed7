"""Spike variations, first and second variation processes, expansion orders.

A spike replaces the base control by a fixed point v on the grid steps
[round(t0/h), round((t0+eps)/h)). The base control is frozen along the
base paths: off the spike both X-bar and X^eps use u-bar_k = law(X-bar_k).

With A = D_x b, B^j = D_x sigma^j evaluated at (X-bar, u-bar) and
delta phi = phi(X-bar, v) - phi(X-bar, u-bar), the explicit Euler schemes are

    y' = y + A y h + sum_j (B^j y + delta sigma^j chi) dW^j
    z' = z + (A z + delta b chi + D^2 b (y)^2 / 2) h
           + sum_j (B^j z + delta(D_x sigma^j) y chi + D^2 sigma^j (y)^2 / 2) dW^j

with (D^2 b (y)^2)_i = y^T D^2 b_i y. X^eps reuses the base increments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controls import ControlLaw, SpikeControl
from .errors import InsufficientPaths, InvalidParams, NonFiniteState, SpikeOutsideHorizon
from .models import ControlModel
from .sde import DEFAULT_MEMORY_BUDGET, PathBundle, TimeGrid, fmt, matvec, simulate_state, split_step

QUANTITIES = ("xi", "y", "z", "eta", "zeta")
ORDER_FIELDS = ("quantity", "k", "eps", "weighted_sup", "std_err")


@dataclass(frozen=True)
class SpikeSpec:
    """Spike of value v on [t0, t0 + epsilon)."""

    t0: float
    epsilon: float
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.atleast_1d(np.asarray(self.v, dtype=float)))
        if self.t0 < 0:
            raise InvalidParams("t0 must be nonnegative")
        if not self.epsilon > 0:
            raise InvalidParams("epsilon must be positive")

    def steps(self, grid: TimeGrid):
        """Grid steps [start, end) covered by the spike."""
        if self.t0 + self.epsilon > grid.horizon_T * (1 + 1e-12):
            raise SpikeOutsideHorizon(f"[{self.t0}, {self.t0 + self.epsilon}] is not inside [0, {grid.horizon_T}]")
        h = grid.step_h
        return int(round(self.t0 / h)), min(grid.steps, int(round((self.t0 + self.epsilon) / h)))

    def realized_epsilon(self, grid: TimeGrid) -> float:
        start, end = self.steps(grid)
        return (end - start) * grid.step_h

    def with_epsilon(self, epsilon: float) -> "SpikeSpec":
        return SpikeSpec(self.t0, epsilon, self.v)


def make_spike(control: ControlLaw, spike: SpikeSpec, grid: TimeGrid) -> ControlLaw:
    """Law equal to ``control`` off the spike steps and to v on them."""
    start, end = spike.steps(grid)
    if end <= start:
        return control
    return SpikeControl(control, start, end, spike.v)


def quadratic_form(H: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(y^T H_i y)_i for H of shape (M, n, n, n) and y of shape (M, n)."""
    if y.shape[1] == 1:
        return H[:, 0, 0, :] * (y * y)
    return np.einsum("nilk,nl,nk->ni", H, y, y)


# ---------------------------------------------------------------------------
# the variation pass
# ---------------------------------------------------------------------------


class _Moments:
    """Per-node mean and standard error of e^{-r k t} |v|^{2k}."""

    def __init__(self, orders, nodes):
        self.orders = tuple(orders)
        self.mean = {(q, k): np.zeros(nodes) for q in QUANTITIES for k in self.orders}
        self.se = {(q, k): np.zeros(nodes) for q in QUANTITIES for k in self.orders}

    def record(self, i, t, r, values: dict):
        for q, v in values.items():
            sq = np.sum(v * v, axis=1) if v.shape[1] > 1 else (v[:, 0] * v[:, 0])
            M = sq.shape[0]
            for k in self.orders:
                w = math.exp(-r * k * t) * (sq if k == 1 else sq**k)
                mean = float(np.sum(w)) / M
                self.mean[(q, k)][i] = mean
                if M > 1:
                    var = max(float(np.dot(w, w)) / M - mean * mean, 0.0) * M / (M - 1)
                    self.se[(q, k)][i] = math.sqrt(var / M)


@dataclass(frozen=True, eq=False)
class VariationBundle:
    """Spike variation of a base bundle.

    Node grids (``x_eps``, ``y_eps``, ``z_eps``; shape (nodes, M, n)) are
    kept when they fit the memory budget, otherwise only the per-node
    moment summaries and pathwise integrals are retained. ``xi``, ``eta``
    and ``zeta`` are derived from the stored grids.
    """

    model: ControlModel
    base: PathBundle
    spike: SpikeSpec
    start_step: int
    end_step: int
    epsilon: float
    moment_orders: tuple
    moment_mean: dict = field(repr=False)
    moment_se: dict = field(repr=False)
    integrals: dict = field(repr=False)
    x_eps: Optional[np.ndarray] = field(default=None, repr=False)
    y_eps: Optional[np.ndarray] = field(default=None, repr=False)
    z_eps: Optional[np.ndarray] = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def _base_states(self):
        return self.base.states_array()

    @property
    def xi(self) -> np.ndarray:
        return self.x_eps - self._base_states()

    @property
    def eta(self) -> np.ndarray:
        return self.xi - self.y_eps

    @property
    def zeta(self) -> np.ndarray:
        return self.xi - self.y_eps - self.z_eps

    def weighted_sup(self, quantity: str, k: int = 1):
        """(sup over nodes of e^{-rkt} E|.|^{2k}, its std error, argmax node)."""
        mean = self.moment_mean[(quantity, k)]
        i = int(np.argmax(mean))
        return float(mean[i]), float(self.moment_se[(quantity, k)][i]), i

    def accumulate(self, adjoint=None, hessian=None, second=None, track_Y: bool = False) -> dict:
        """Pathwise integrals that need adjoint, Hessian or P fields.

        Replays the variation pass; results are cached per object identity
        of the supplied fields.
        """
        key = (id(adjoint), id(hessian), id(second), track_Y)
        if key not in self._cache:
            out = _variation_pass(
                self.model, self.base, self.spike, False, self.moment_orders, adjoint, hessian, second, track_Y
            )
            self._cache[key] = out["integrals"]
        return self._cache[key]


def _spike_deltas(model, x, u, v):
    vv = np.broadcast_to(v, u.shape)
    return {
        "b": model.b(x, vv) - model.b(x, u),
        "sigma": model.sigma(x, vv) - model.sigma(x, u),
        "sigma_x": model.sigma_x(x, vv) - model.sigma_x(x, u),
        "f": model.f(x, vv) - model.f(x, u),
    }


def _dot(a, b):
    if a.shape[1] == 1:
        return a[:, 0] * b[:, 0]
    return np.sum(a * b, axis=1)


def _variation_pass(model, base, spike, store, orders, adjoint=None, hessian=None, second=None, track_Y=False):
    grid = base.grid
    h, r = grid.step_h, grid.discount_r
    k0, k1 = spike.steps(grid)
    if not model.control_set.contains(spike.v):
        raise InvalidParams(f"spike value {spike.v} is not in the control set")
    if base.start_step != 0:
        raise InvalidParams("variations need a base bundle starting at step 0")
    M, n, d = base.paths_M, model.state_dim, model.noise_dim
    N = base.end_step
    nodes = N + 1
    moments = _Moments(orders, nodes)
    zeros = np.zeros((M, n))
    arrays = None
    if store:
        arrays = {key: np.zeros((nodes, M, n)) for key in ("x", "y", "z")}
    names = ["cost_first", "cost_second", "cost_direct"]
    if adjoint is not None:
        names += ["yp_lhs", "yp_rhs", "zp_lhs", "zp_rhs", "zp_jump"]
    if hessian is not None:
        names += ["spike_lhs"]
    if second is not None:
        names += ["spike_rhs"]
    if track_Y:
        names += ["Y_norm", "Gamma_norm", "Lambda_norm", "Y_drift_residual", "Y_path_residual"]
    acc = {name: np.zeros(M) for name in names}
    path_res = np.zeros((M, n, n))
    trunc = adjoint.truncation_step if adjoint is not None else N
    hess_trunc = getattr(hessian, "truncation_step", N) if hessian is not None else N

    y = zeros.copy()
    z = zeros.copy()
    xe = None
    for s in base.iter_forward(0, N):
        i = s.k
        if i < k0:
            if store:
                arrays["x"][i] = s.x
            continue
        if xe is None:
            xe = s.x.copy()
        active = k0 <= i < k1
        xi = xe - s.x
        eta = xi - y
        moments.record(i, s.t, r, {"xi": xi, "y": y, "z": z, "eta": eta, "zeta": eta - z})
        if store:
            arrays["x"][i], arrays["y"][i], arrays["z"][i] = xe, y, z
        w = h * math.exp(-r * s.t)
        A = model.b_x(s.x, s.u)
        B = model.sigma_x(s.x, s.u)
        fx = model.f_x(s.x, s.u)
        ue = np.broadcast_to(spike.v, s.u.shape) if active else s.u
        acc["cost_direct"] += w * (model.f(xe, ue) - model.f(s.x, s.u))
        acc["cost_first"] += w * _dot(fx, y + z)
        fxx = model.f_xx(s.x, s.u)
        second_order = 0.5 * _dot(matvec(fxx, y), y)
        delta = _spike_deltas(model, s.x, s.u, spike.v) if active else None
        if active:
            second_order = second_order + delta["f"]
        acc["cost_second"] += w * second_order
        Bxx = model.sigma_xx(s.x, s.u)
        D2b = quadratic_form(model.b_xx(s.x, s.u), y)
        D2s = [quadratic_form(Bxx[:, j], y) for j in range(d)]
        dsig = [delta["sigma"][:, :, j] if active else None for j in range(d)]
        jump = [matvec(delta["sigma_x"][:, j], y) if active else None for j in range(d)]

        if adjoint is not None and i < trunc:
            pplus = adjoint.p_plus(i, s.x)
            q = adjoint.q(i, s.x)
            acc["yp_lhs"] += w * _dot(fx, y)
            acc["zp_lhs"] -= w * _dot(fx, z)
            drift_part = 0.5 * D2b + (delta["b"] if active else 0.0)
            rhs = _dot(pplus, drift_part)
            for j in range(d):
                rhs = rhs + 0.5 * _dot(q[:, :, j], D2s[j])
                if active:
                    acc["yp_rhs"] -= w * _dot(q[:, :, j], dsig[j])
                    jt = _dot(q[:, :, j], jump[j])
                    rhs = rhs + jt
                    acc["zp_jump"] += w * jt
            acc["zp_rhs"] += w * rhs
        if hessian is not None and i < hess_trunc:
            D2H = hessian.evaluate(i, s.x, s.u)
            acc["spike_lhs"] += w * _dot(matvec(D2H, y), y)
        if second is not None and active:
            Pp = second.p_plus_matrix(i, s.x)
            for j in range(d):
                acc["spike_rhs"] += w * _dot(matvec(Pp, dsig[j]), dsig[j])

        # advance
        Ay = matvec(A, y)
        y_new = y + h * Ay
        z_new = z + h * (matvec(A, z) + 0.5 * D2b + (delta["b"] if active else 0.0))
        for j in range(d):
            dwj = s.dw[:, j : j + 1]
            y_new = y_new + (matvec(B[:, j], y) + (dsig[j] if active else 0.0)) * dwj
            zj = matvec(B[:, j], z) + 0.5 * D2s[j]
            if active:
                zj = zj + jump[j]
            z_new = z_new + zj * dwj
        if track_Y:
            # Y = y y^T bookkeeping
            c = [matvec(B[:, j], y) + (dsig[j] if active else 0.0) for j in range(d)]
            Y = y[:, :, None] * y[:, None, :]
            Gamma = np.zeros_like(Y)
            Lams = []
            BYB = np.zeros_like(Y)
            for j in range(d):
                By = matvec(B[:, j], y)
                BYB += By[:, :, None] * By[:, None, :]
                if active:
                    ds = dsig[j]
                    Gamma += ds[:, :, None] * ds[:, None, :] + By[:, :, None] * ds[:, None, :] + ds[:, :, None] * By[:, None, :]
                    Lams.append(ds[:, :, None] * y[:, None, :] + y[:, :, None] * ds[:, None, :])
                else:
                    Lams.append(np.zeros_like(Y))
            AY = Ay[:, :, None] * y[:, None, :]
            drift = AY + np.swapaxes(AY, 1, 2) + BYB + Gamma
            acc["Y_norm"] += w * np.sum(Y * Y, axis=(1, 2))
            acc["Gamma_norm"] += w * np.sum(Gamma * Gamma, axis=(1, 2))
            acc["Lambda_norm"] += w * sum(np.sum(L * L, axis=(1, 2)) for L in Lams)

            # conditional mean of Y_{k+1} under the Euler step minus the Ito drift step
            ccT = sum(cj[:, :, None] * cj[:, None, :] for cj in c)
            cond_mean = Y + h * (AY + np.swapaxes(AY, 1, 2)) + h * h * (Ay[:, :, None] * Ay[:, None, :]) + h * ccT
            step_res = cond_mean - Y - h * drift
            acc["Y_drift_residual"] += np.sqrt(np.sum(step_res * step_res, axis=(1, 2)))
            Y_new = y_new[:, :, None] * y_new[:, None, :]
            mart = sum(
                (matvec(B[:, j], y)[:, :, None] * y[:, None, :]) * s.dw[:, j, None, None]
                + (y[:, :, None] * matvec(B[:, j], y)[:, None, :]) * s.dw[:, j, None, None]
                + Lams[j] * s.dw[:, j, None, None]
                for j in range(d)
            )
            path_res += Y_new - Y - h * drift - mart
            acc["Y_path_residual"] = np.maximum(acc["Y_path_residual"], np.sqrt(np.sum(path_res * path_res, axis=(1, 2))))

        xe = split_step(model, xe, ue, h, s.dw)
        if not np.all(np.isfinite(xe)):
            raise NonFiniteState(f"perturbed state non-finite at step {i + 1}")
        y, z = y_new, z_new

    xT = base.state(N)
    if xe is None:
        xe = xT.copy()
    xi = xe - xT
    eta = xi - y
    moments.record(N, N * h, r, {"xi": xi, "y": y, "z": z, "eta": eta, "zeta": eta - z})
    if store:
        arrays["x"][N], arrays["y"][N], arrays["z"][N] = xe, y, z
    return {"moments": moments, "integrals": acc, "arrays": arrays, "k0": k0, "k1": k1}


def simulate_variations(
    model: ControlModel,
    base: PathBundle,
    spike: SpikeSpec,
    store: Optional[bool] = None,
    moment_orders: Sequence[int] = (1,),
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    adjoint=None,
    hessian=None,
    second=None,
    track_Y: bool = False,
) -> VariationBundle:
    """Simulate X^eps on the base increments together with y^eps and z^eps.

    ``store`` keeps the node grids (default: when three grids fit in
    ``memory_budget`` bytes). Supplying ``adjoint``, ``hessian``,
    ``second`` or ``track_Y`` computes the corresponding integrals in the
    same pass, so later ``accumulate`` calls with the same fields are free.

    Raises
    ------
    SpikeOutsideHorizon, InvalidParams, NewtonDivergence, NonFiniteState
    """
    nodes = base.end_step + 1
    if store is None:
        store = 3 * nodes * base.paths_M * model.state_dim * 8 <= memory_budget
    out = _variation_pass(model, base, spike, store, tuple(moment_orders), adjoint, hessian, second, track_Y)
    arrays = out["arrays"] or {}
    mom = out["moments"]
    k0, k1 = out["k0"], out["k1"]
    return VariationBundle(
        model,
        base,
        spike,
        k0,
        k1,
        (k1 - k0) * base.grid.step_h,
        tuple(moment_orders),
        mom.mean,
        mom.se,
        out["integrals"],
        arrays.get("x"),
        arrays.get("y"),
        arrays.get("z"),
        {(id(adjoint), id(hessian), id(second), track_Y): out["integrals"]},
    )


# ---------------------------------------------------------------------------
# expansion orders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlopeFit:
    """Log-log slope of weighted sups against epsilon."""

    quantity: str
    k: int
    eps: tuple
    values: tuple
    std_errors: tuple
    slope: float
    ci_low: float
    ci_high: float
    degenerate: bool


@dataclass(frozen=True)
class OrderReport:
    """Slopes for xi, y, z, eta, zeta; ``rho`` is the weight used in the sups."""

    k: int
    rho: float
    paths_M: int
    fits: dict

    def slope(self, quantity: str) -> float:
        return self.fits[quantity].slope

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ORDER_FIELDS)
            for q in QUANTITIES:
                f = self.fits[q]
                for e, v, s in zip(f.eps, f.values, f.std_errors):
                    w.writerow([q, f.k, fmt(e), fmt(v), fmt(s)])
            w.writerow(["quantity", "k", "slope", "ci_low", "ci_high", "degenerate"])
            for q in QUANTITIES:
                f = self.fits[q]
                w.writerow([q, f.k, fmt(f.slope), fmt(f.ci_low), fmt(f.ci_high), int(f.degenerate)])


def log_log_slope(eps, values, std_errors):
    """Weighted least-squares slope of log value on log eps with a 95% interval.

    Weights come from the delta-method variance se^2 / value^2 of each log
    value. The interval uses the Student t quantile for len(eps) - 2
    degrees of freedom applied to the larger of the propagated and the
    residual-based slope variance.
    """
    from scipy import stats

    le = np.log(np.asarray(eps, dtype=float))
    lv = np.log(np.asarray(values, dtype=float))
    var = (np.asarray(std_errors, dtype=float) / np.asarray(values, dtype=float)) ** 2
    var = np.maximum(var, 1e-30)
    wts = 1.0 / var
    X = np.stack([np.ones_like(le), le], axis=1)
    cov = np.linalg.inv(X.T @ (wts[:, None] * X))
    beta = cov @ (X.T @ (wts * lv))
    slope = float(beta[1])
    resid = lv - X @ beta
    dof = len(le) - 2
    prop_var = cov[1, 1]
    resid_var = prop_var * float(np.sum(wts * resid**2)) / dof if dof > 0 else prop_var
    half = float(stats.t.ppf(0.975, max(dof, 1)) * math.sqrt(max(prop_var, resid_var)))
    return slope, slope - half, slope + half


def estimate_expansion_orders(
    model: ControlModel,
    control: ControlLaw,
    spike: SpikeSpec,
    eps_list: Sequence[float],
    k: int,
    M: int,
    seed: int,
    grid: TimeGrid,
    base: Optional[PathBundle] = None,
    workers: int = 1,
) -> OrderReport:
    """Slopes of sup_t e^{-rkt} E|.|^{2k} against epsilon for the five variation quantities.

    ``spike`` is a template whose epsilon is replaced by each entry of
    ``eps_list``. The expected slopes are k for xi and y, 2k for z and eta
    and more than 2k for zeta. A quantity whose values are all zero is
    reported as degenerate with a nan slope.

    Raises
    ------
    InvalidParams
        eps_list has fewer than 4 entries, does not span a decade or is
        not strictly decreasing.
    InsufficientPaths
        a non-degenerate quantity has a value within 2 std errors of 0.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 4:
        raise InvalidParams("eps_list needs at least 4 entries")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])) or eps_list[-1] <= 0:
        raise InvalidParams("eps_list must be strictly decreasing and positive")
    if eps_list[0] / eps_list[-1] < 8 * (1 - 1e-9):
        raise InvalidParams("eps_list must span at least a factor 8 (about one decade)")
    if base is None:
        base = simulate_state(model, control, grid, M, seed, workers=workers)
    realized, values, ses = [], {q: [] for q in QUANTITIES}, {q: [] for q in QUANTITIES}
    for e in eps_list:
        var = simulate_variations(model, base, spike.with_epsilon(e), store=False, moment_orders=(k,))
        if var.epsilon <= 0:
            raise InvalidParams(f"epsilon {e} rounds to zero grid steps")
        realized.append(var.epsilon)
        for q in QUANTITIES:
            v, s, _ = var.weighted_sup(q, k)
            values[q].append(v)
            ses[q].append(s)
    fits = {}
    for q in QUANTITIES:
        vals = np.array(values[q])
        se = np.array(ses[q])
        if np.all(vals == 0):
            fits[q] = SlopeFit(q, k, tuple(realized), tuple(vals), tuple(se), math.nan, math.nan, math.nan, True)
            continue
        if np.any(vals <= 2.0 * se):
            raise InsufficientPaths(
                f"{q}: weighted sups {vals.tolist()} are within 2 std errors of zero; increase M"
            )
        slope, lo, hi = log_log_slope(realized, vals, se)
        fits[q] = SlopeFit(q, k, tuple(realized), tuple(vals), tuple(se), slope, lo, hi, False)
    return OrderReport(k, grid.discount_r, base.paths_M, fits)


# ---------------------------------------------------------------------------
# cost expansion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostExpansion:
    """Monte Carlo terms of the second-order cost expansion under one spike.

    ``first_order`` is E int e^{-rt} <D_x f, y + z> dt, ``second_order`` is
    E int e^{-rt} [<D^2 f y, y> / 2 + delta f chi] dt and ``direct`` the
    simulated J(u^eps) - J(u-bar) on the truncated horizon.
    """

    epsilon: float
    first_order: float
    second_order: float
    direct: float
    remainder: float
    remainder_std_err: float
    std_errors: dict

    @property
    def expansion(self) -> float:
        return self.first_order + self.second_order


def expand_cost(model: ControlModel, base: PathBundle, variations: VariationBundle) -> CostExpansion:
    """Cost expansion terms and the direct cost difference under common noise."""
    acc = variations.integrals
    a, b, c = acc["cost_first"], acc["cost_second"], acc["cost_direct"]
    rem = c - a - b
    M = rem.shape[0]

    def se(v):
        return float(v.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0

    return CostExpansion(
        variations.epsilon,
        float(a.mean()),
        float(b.mean()),
        float(c.mean()),
        float(rem.mean()),
        se(rem),
        {"first_order": se(a), "second_order": se(b), "direct": se(c)},
    )

"""First adjoint BSDE by truncation and least-squares Monte Carlo.

On the grid t_k = k h with rho = e^{-rh} the backward step is

    pplus_k = rho E_k[p_{k+1}]                      (regression on X_k)
    q_k     = rho E_k[(p_{k+1} - E_k p_{k+1}) dW_k^T] / h
    p_k     = pplus_k + h (D_x b^T p + sum_j D_x sigma^j^T q^j - D_x f)

where the bracket is evaluated at (X_k, u_k) and, with ``picard_sweeps``
equal to 1, at p = pplus_k (predict with the value at t + h, correct
once). The discount enters through rho instead of an explicit -r p term.
For this pairing the discrete first variation satisfies the duality
identities exactly in expectation, up to regression error. The sweep
count is configurable; extra sweeps reuse the latest p.

Only the conditional expectations are regressed. Given the per-step
coefficients, p_k, pplus_k and q_k are explicit functions of (X_k, u_k)
and can be evaluated on any state array.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParams
from .models import ControlModel, probe_joint_monotonicity
from .regression import LOW_R2, Projector, RegressionBasis, RegressionFit
from .sde import PathBundle, fmt

IDENTITY_FIELDS = ("name", "lhs", "rhs", "diff", "std_err", "verdict")


def contract_sigma_t(B: np.ndarray, q: np.ndarray) -> np.ndarray:
    """sum_j D_x sigma^j^T q^j for B of shape (M, d, n, n) and q of shape (M, n, d)."""
    if B.shape[2] == 1 and B.shape[1] == 1:
        return B[:, 0, 0, :] * q[:, 0, 0:1]
    return np.einsum("mjil,mij->ml", B, q)


def transpose_matvec(A: np.ndarray, p: np.ndarray) -> np.ndarray:
    """A^T p for A of shape (M, n, n)."""
    if A.shape[-1] == 1:
        return A[:, 0, :] * p
    return np.einsum("mil,mi->ml", A, p)


@dataclass(frozen=True, eq=False)
class AdjointSolution:
    """Regressed first adjoint (p, q) along a path bundle.

    ``mean_fits[k]`` regresses rho p_{k+1} and ``q_fits[k]`` the
    increment-weighted residual, both on basis(X_k), for k below the
    truncation node; p and q vanish from the truncation node on.
    """

    model: ControlModel
    bundle: PathBundle
    basis: RegressionBasis
    truncation_T: float
    truncation_step: int
    picard_sweeps: int
    mean_fits: dict = field(repr=False)
    q_fits: dict = field(repr=False)
    r2_mean: np.ndarray = field(repr=False)
    r2_q: np.ndarray = field(repr=False)
    condition: np.ndarray = field(repr=False)

    @property
    def rho(self) -> float:
        return math.exp(-self.bundle.grid.discount_r * self.bundle.grid.step_h)

    @property
    def residual_diagnostics(self) -> np.ndarray:
        """Per-step regression R^2 of the conditional mean (worst component)."""
        return self.r2_mean

    def low_r2_steps(self, threshold: float = LOW_R2) -> np.ndarray:
        return np.nonzero(self.r2_mean < threshold)[0]

    def _zeros(self, M, *shape):
        return np.zeros((M,) + shape)

    def p_plus(self, k: int, x: np.ndarray) -> np.ndarray:
        """rho E_k[p_{k+1}] as a function of X_k, shape (M, n)."""
        if k >= self.truncation_step:
            return self._zeros(x.shape[0], self.model.state_dim)
        return self.mean_fits[k].predict(x)

    def q(self, k: int, x: np.ndarray) -> np.ndarray:
        """q_k as a function of X_k, shape (M, n, d)."""
        n, d = self.model.state_dim, self.model.noise_dim
        if k >= self.truncation_step:
            return self._zeros(x.shape[0], n, d)
        return self.q_fits[k].predict(x).reshape(x.shape[0], n, d)

    def p(self, k: int, x: np.ndarray, u: Optional[np.ndarray] = None) -> np.ndarray:
        """p_k as a function of (X_k, u_k); u defaults to the bundle's law."""
        if k >= self.truncation_step:
            return self._zeros(x.shape[0], self.model.state_dim)
        u = self.bundle.control_at(k, x) if u is None else u
        return self._corrected(k, x, u, self.p_plus(k, x), self.q(k, x))

    def _corrected(self, k, x, u, pplus, q):
        if self.picard_sweeps == 0:
            return pplus
        h = self.bundle.grid.step_h
        m = self.model
        A = m.b_x(x, u)
        forcing = contract_sigma_t(m.sigma_x(x, u), q) - m.f_x(x, u)
        p = pplus
        for _ in range(self.picard_sweeps):
            p = pplus + h * (transpose_matvec(A, p) + forcing)
        return p

    def p_at(self, k: int) -> np.ndarray:
        """p_k along the bundle's paths."""
        return self.p(k, self.bundle.state(k))

    def q_at(self, k: int) -> np.ndarray:
        return self.q(k, self.bundle.state(k))

    def to_csv(self, path, paths: Optional[Sequence[int]] = None):
        """Write path_id, step, t, p_1..p_n, q_11..q_nd rows, step-major."""
        n, d = self.model.state_dim, self.model.noise_dim
        ids = np.arange(self.bundle.paths_M) if paths is None else np.asarray(paths, dtype=int)
        header = ["path_id", "step", "t"] + [f"p_{i + 1}" for i in range(n)]
        header += [f"q_{i + 1}{j + 1}" for i in range(n) for j in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)

            def rows(k, x, u):
                p = self.p(k, x, u)[ids]
                q = self.q(k, x)[ids].reshape(len(ids), n * d)
                t = fmt(self.bundle.time(k))
                for i, pid in enumerate(ids):
                    w.writerow([int(pid), k, t] + [fmt(v) for v in p[i]] + [fmt(v) for v in q[i]])

            for s in self.bundle.iter_forward():
                rows(s.k, s.x, s.u)
            k = self.bundle.end_step
            x = self.bundle.state(k)
            rows(k, x, self.bundle.control_at(k, x))


def truncation_node(bundle: PathBundle, truncation_T: Optional[float]) -> int:
    N = bundle.end_step
    if truncation_T is None:
        return N
    if truncation_T <= 0:
        raise InvalidParams("truncation must be positive")
    if truncation_T > bundle.grid.horizon_T * (1 + 1e-12):
        raise InvalidParams("truncation exceeds the bundle horizon")
    return min(N, int(math.floor(truncation_T / bundle.grid.step_h + 1e-9)))


def solve_first_adjoint(
    model: ControlModel,
    bundle: PathBundle,
    basis: RegressionBasis = RegressionBasis(),
    truncation_k: Optional[float] = None,
    picard_sweeps: int = 1,
) -> AdjointSolution:
    """Backward induction from p = 0 at min(truncation_k, T).

    Parameters
    ----------
    truncation_k : float, optional
        Time after which the forcing D_x f is cut and p is zero; defaults
        to the bundle horizon.
    picard_sweeps : int
        Corrections of the driver's p-dependence per step (0 keeps the
        discounted predictor).

    Raises
    ------
    SingularDesignMatrix, NonFiniteRegression
    """
    if picard_sweeps < 0:
        raise InvalidParams("picard_sweeps must be nonnegative")
    if bundle.start_step != 0:
        raise InvalidParams("the adjoint needs a bundle starting at step 0")
    K = truncation_node(bundle, truncation_k)
    n, d, M = model.state_dim, model.noise_dim, bundle.paths_M
    h = bundle.grid.step_h
    rho = math.exp(-bundle.grid.discount_r * h)
    mean_fits, q_fits = {}, {}
    r2_mean = np.ones(K)
    r2_q = np.ones(K)
    cond = np.ones(K)
    proto = AdjointSolution(model, bundle, basis, K * h, K, picard_sweeps, {}, {}, r2_mean, r2_q, cond)
    p_next = np.zeros((M, n))
    for s in bundle.iter_backward(0, K):
        proj = Projector(basis, s.x)
        target = rho * p_next
        fit_c = proj.fit(target)
        c_hat = proj.fitted(fit_c)
        resid = target - c_hat
        if d == 1 and n == 1:
            tq = resid * s.dw / h
        else:
            tq = (resid[:, :, None] * s.dw[:, None, :]).reshape(M, n * d) / h
        fit_q = proj.fit(tq)
        q_hat = proj.fitted(fit_q).reshape(M, n, d)
        mean_fits[s.k] = fit_c
        q_fits[s.k] = fit_q
        r2_mean[s.k] = float(np.min(fit_c.r2))
        r2_q[s.k] = float(np.min(fit_q.r2))
        cond[s.k] = proj.condition
        p_next = proto._corrected(s.k, s.x, s.u, c_hat, q_hat)
    return AdjointSolution(model, bundle, basis, K * h, K, picard_sweeps, mean_fits, q_fits, r2_mean, r2_q, cond)


# ---------------------------------------------------------------------------
# identity reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IdentityReport:
    """Monte Carlo comparison of the two sides of an identity.

    ``std_err`` is the standard error of the pathwise difference, so it
    accounts for the correlation between the sides.
    """

    name: str
    lhs: float
    rhs: float
    diff: float
    std_err: float
    lhs_std_err: float
    rhs_std_err: float
    paths_M: int
    tolerance: float
    verdict: str
    extras: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.name, fmt(self.lhs), fmt(self.rhs), fmt(self.diff), fmt(self.std_err), self.verdict]


def _se(values: np.ndarray) -> float:
    M = values.shape[0]
    return float(values.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0


def identity_report(name, lhs_paths, rhs_paths, tolerance=0.0, extras=None) -> IdentityReport:
    """Compare pathwise samples; holds when |diff| <= 3 se + tolerance."""
    diff_paths = lhs_paths - rhs_paths
    lhs, rhs = float(lhs_paths.mean()), float(rhs_paths.mean())
    se = _se(diff_paths)
    diff = float(diff_paths.mean())
    verdict = "holds" if abs(diff) <= 3.0 * se + tolerance else "fails"
    return IdentityReport(
        name, lhs, rhs, diff, se, _se(lhs_paths), _se(rhs_paths), lhs_paths.shape[0], tolerance, verdict, extras or {}
    )


def write_identity_csv(path, reports: Sequence[IdentityReport]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IDENTITY_FIELDS)
        for rep in reports:
            w.writerow(rep.csv_row())


def check_duality_yp(model, bundle, adjoint: AdjointSolution, variations, tolerance: Optional[float] = None):
    """E int e^{-rt} <y, D_x f> dt against -sum_j E int e^{-rt} <q^j, delta sigma^j> dt.

    ``tolerance`` defaults to 0.5 h |lhs|, the discretization allowance.
    """
    acc = variations.accumulate(adjoint=adjoint)
    lhs, rhs = acc["yp_lhs"], acc["yp_rhs"]
    tol = 0.5 * bundle.grid.step_h * abs(float(lhs.mean())) if tolerance is None else tolerance
    return identity_report("duality_yp", lhs, rhs, tol)


def check_duality_zp(model, bundle, adjoint: AdjointSolution, variations, tolerance: Optional[float] = None):
    """-E int e^{-rt} <z, D_x f> dt against the p- and q-weighted second-order terms.

    The right side is E int e^{-rt} [<delta b chi + D^2 b(y)^2 / 2, p>
    + sum_j <D^2 sigma^j(y)^2 / 2 + delta(D_x sigma^j) y chi, q^j>] dt with
    p taken at t + h. The last term is of higher order in epsilon; its
    value is reported under extras["jump_term"].
    """
    acc = variations.accumulate(adjoint=adjoint)
    lhs, rhs = acc["zp_lhs"], acc["zp_rhs"]
    tol = 0.5 * bundle.grid.step_h * abs(float(lhs.mean())) if tolerance is None else tolerance
    return identity_report("duality_zp", lhs, rhs, tol, {"jump_term": float(acc["zp_jump"].mean())})


# ---------------------------------------------------------------------------
# a priori estimates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContractionReport:
    """Both sides of the weighted backward a priori estimate for one delta."""

    delta: float
    c_half: float
    lhs: float
    rhs: float
    p_term: float
    q_term: float
    forcing_term: float
    holds: bool
    binding_delta: float


def _weighted_differences(a1: AdjointSolution, a2: AdjointSolution):
    bundle = a1.bundle
    h, r = bundle.grid.step_h, bundle.grid.discount_r
    K = max(a1.truncation_step, a2.truncation_step)
    M = bundle.paths_M
    dp = np.zeros(M)
    dq = np.zeros(M)
    df = np.zeros(M)
    for s in bundle.iter_forward(0, K):
        w = h * math.exp(-r * s.t)
        diff_p = a1.p(s.k, s.x, s.u) - a2.p(s.k, s.x, s.u)
        diff_q = a1.q(s.k, s.x) - a2.q(s.k, s.x)
        diff_f = np.zeros_like(diff_p)
        if s.k < a1.truncation_step:
            diff_f = diff_f + a1.model.f_x(s.x, s.u)
        if s.k < a2.truncation_step:
            diff_f = diff_f - a2.model.f_x(s.x, s.u)
        dp += w * np.sum(diff_p * diff_p, axis=1)
        dq += w * np.sum(diff_q * diff_q, axis=(1, 2))
        df += w * np.sum(diff_f * diff_f, axis=1)
    return float(dp.mean()), float(dq.mean()), float(df.mean())


def apriori_contraction_check(
    model: ControlModel,
    bundle: PathBundle,
    first: AdjointSolution,
    second: AdjointSolution,
    delta: Optional[float] = None,
    c_half: Optional[float] = None,
    seed: int = 0,
) -> ContractionReport:
    """Check (r - 2c - delta) |dp|^2 + |dq|^2 / 2 <= |dD_x f|^2 / delta in weighted mean.

    ``first`` and ``second`` are adjoints on the same bundle for two cost
    variants. c defaults to the probed c_{1/2}; delta defaults to half of
    r - 2c. ``binding_delta`` is the largest delta on a grid over
    (0, r - 2c) for which the estimate holds empirically (nan if none).
    """
    r = bundle.grid.discount_r
    c = probe_joint_monotonicity(model, 0.5, seed=seed).c_p_estimate if c_half is None else c_half
    gap = r - 2.0 * c
    if gap <= 0:
        raise InvalidParams(f"need r > 2 c_1/2 (r = {r}, c_1/2 = {c})")
    delta = 0.5 * gap if delta is None else delta
    if not 0 < delta:
        raise InvalidParams("delta must be positive")
    p_term, q_term, f_term = _weighted_differences(first, second)

    def sides(dl):
        return (gap - dl) * p_term + 0.5 * q_term, f_term / dl

    lhs, rhs = sides(delta)
    tol = 1e-12 * (abs(lhs) + abs(rhs))
    binding = math.nan
    for dl in np.linspace(gap, 0, 200, endpoint=False)[::-1]:
        a, b = sides(dl)
        if a <= b + 1e-12 * (abs(a) + abs(b)):
            binding = float(dl)
    return ContractionReport(delta, c, lhs, rhs, p_term, q_term, f_term, bool(lhs <= rhs + tol), binding)


@dataclass(frozen=True)
class CauchyReport:
    """Weighted L^2 distances between adjoints at successive truncations."""

    truncations: tuple
    distances: tuple
    std_errors: tuple
    decreasing: bool


def truncation_cauchy(
    model: ControlModel,
    bundle: PathBundle,
    truncations: Sequence[float],
    basis: RegressionBasis = RegressionBasis(),
    picard_sweeps: int = 1,
) -> CauchyReport:
    """E int e^{-rt} |p^{k_i} - p^{k_last}|^2 dt for increasing truncations k_i.

    Distances are measured against the longest truncation and should
    decrease as k_i grows (last entry is zero).
    """
    ks = sorted(truncations)
    sols = [solve_first_adjoint(model, bundle, basis, k, picard_sweeps) for k in ks]
    ref = sols[-1]
    h, r, M = bundle.grid.step_h, bundle.grid.discount_r, bundle.paths_M
    accs = [np.zeros(M) for _ in ks]
    for s in bundle.iter_forward(0, ref.truncation_step):
        w = h * math.exp(-r * s.t)
        p_ref = ref.p(s.k, s.x, s.u)
        for acc, sol in zip(accs, sols):
            diff = sol.p(s.k, s.x, s.u) - p_ref
            acc += w * np.sum(diff * diff, axis=1)
    dist = tuple(float(a.mean()) for a in accs)
    ses = tuple(_se(a) for a in accs)
    decreasing = all(dist[i + 1] <= dist[i] + 3.0 * (ses[i] + ses[i + 1]) for i in range(len(dist) - 1))
    return CauchyReport(tuple(ks), dist, ses, decreasing)

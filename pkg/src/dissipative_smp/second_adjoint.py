"""Second adjoint P_t through its duality with linearized flows.

For eta, gamma in R^n the flows y^{t,eta}, y^{t,gamma} of the homogeneous
first-variation equation give

    <P_t eta, gamma> = E^{F_t} int_t^T e^{-r(s-t)} <D^2_x H(s) y^{t,eta}_s, y^{t,gamma}_s> ds.

On the grid with Phi_k = I + A_k h + sum_j B^j_k dW^j_k the Euler flows
are products of the Phi_k, so the pathwise integral for all basis pairs
at once is the matrix

    G_k = h D^2_x H_k + rho Phi_k^T G_{k+1} Phi_k,   G_N = 0,

and <G_k eta, gamma> equals the left-point quadrature of the integral
along the Euler flows (``duality_form`` computes it directly from the
flows). P_t is E[G_k | X_k], estimated either by regression on
basis(X_k) or by averaging G_k over inner continuations of each outer path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .adjoint import AdjointSolution, IdentityReport, identity_report
from .errors import InsufficientInnerPaths, InvalidParams
from .models import ControlModel, probe_joint_monotonicity
from .regression import Projector, RegressionBasis, RegressionFit
from .sde import PathBundle, fmt, matvec, simulate_linearized_flow, simulate_state
from .variation import SpikeSpec, VariationBundle, simulate_variations

MODES = ("regression", "nested")
ESTIMATE_FIELDS = ("t", "i", "j", "P_ij", "stderr_ij", "mode", "flows_per_basis")
TAIL_LIMIT = 1e-6


def _symmetric(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


@dataclass(frozen=True, eq=False)
class HessianOfH:
    """Lazy field D^2_x H(X_k, u_k, p_k, q_k) = sum_i p_i D^2 b^i + sum_ij q_ij D^2 sigma^ij - D^2 f."""

    model: ControlModel
    bundle: PathBundle
    adjoint: Optional[AdjointSolution]

    @property
    def truncation_step(self) -> int:
        return self.bundle.end_step

    def raw(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        m = self.model
        out = -m.f_xx(x, u)
        if self.adjoint is None:
            return out
        p = self.adjoint.p(k, x, u)
        q = self.adjoint.q(k, x)
        if np.any(p):
            out = out + np.einsum("mi,mils->mls", p, m.b_xx(x, u))
        if np.any(q):
            out = out + np.einsum("mij,mjils->mls", q, m.sigma_xx(x, u))
        return out

    def evaluate(self, k: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Symmetrized Hessian at step k, shape (M, n, n)."""
        return _symmetric(self.raw(k, x, u))

    def at(self, k: int) -> np.ndarray:
        x = self.bundle.state(k)
        return self.evaluate(k, x, self.bundle.control_at(k, x))


def hessian_H(model: ControlModel, bundle: PathBundle, adjoint: Optional[AdjointSolution]) -> HessianOfH:
    """x-Hessian of the Hamiltonian along the bundle (p = q = 0 when adjoint is None)."""
    if adjoint is not None and adjoint.bundle is not bundle:
        raise InvalidParams("adjoint was solved on a different bundle")
    return HessianOfH(model, bundle, adjoint)


def flow_matrix(model, x, u, h, dw) -> np.ndarray:
    """Phi = I + D_x b h + sum_j D_x sigma^j dW^j, shape (M, n, n)."""
    n = model.state_dim
    phi = np.eye(n) + h * model.b_x(x, u)
    B = model.sigma_x(x, u)
    for j in range(dw.shape[1]):
        phi = phi + B[:, j] * dw[:, j, None, None]
    return phi


def _congruence(phi, G):
    if phi.shape[-1] == 1:
        return phi * G * phi
    return np.einsum("mki,mkl,mlj->mij", phi, G, phi)


@dataclass(frozen=True, eq=False)
class SecondAdjointEstimate:
    """Estimate of P at one node.

    ``matrix`` is the path average of the conditional matrix (symmetric
    part), ``std_error_matrix`` its Monte Carlo standard error and
    ``pathwise`` the conditional matrix per (outer) path. In regression
    mode ``fit`` maps X_k to P_k and ``plus_fit`` to rho E_k[G_{k+1}], the
    weight of an increment entering at step k.
    """

    t: float
    step: int
    matrix: np.ndarray
    std_error_matrix: np.ndarray
    flows_per_basis: int
    conditioning: str
    raw_asymmetry: float
    asymmetry_in_std_errors: float
    tail_flow_magnitude: float
    pathwise: np.ndarray = field(repr=False)
    fit: Optional[RegressionFit] = field(default=None, repr=False)
    plus_fit: Optional[RegressionFit] = field(default=None, repr=False)

    @property
    def tail_ok(self) -> bool:
        return self.tail_flow_magnitude <= TAIL_LIMIT

    def form(self, eta, gamma) -> float:
        return float(np.asarray(gamma) @ self.matrix @ np.asarray(eta))

    def csv_rows(self) -> list:
        n = self.matrix.shape[0]
        return [
            [fmt(self.t), i + 1, j + 1, fmt(self.matrix[i, j]), fmt(self.std_error_matrix[i, j]),
             self.conditioning, self.flows_per_basis]
            for i in range(n)
            for j in range(n)
        ]


def write_estimates_csv(path, estimates: Sequence[SecondAdjointEstimate]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_FIELDS)
        for est in estimates:
            w.writerows(est.csv_rows())


def _mean_se(samples: np.ndarray):
    M = samples.shape[0]
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(M) if M > 1 else np.zeros_like(mean)
    return mean, se


def _summarize(t, k, raw_samples, conditional, flows, mode, tail, fit=None, plus_fit=None):
    mean_raw, se_raw = _mean_se(raw_samples)
    asym = np.abs(mean_raw - mean_raw.T)
    asym_se = np.sqrt(se_raw**2 + se_raw.T**2)
    raw_asym = float(asym.max())
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(asym_se > 0, asym / np.where(asym_se > 0, asym_se, 1.0), np.where(asym > 0, np.inf, 0.0))
    sym_samples = _symmetric(raw_samples)
    mean, se = _mean_se(sym_samples)
    return SecondAdjointEstimate(
        t, k, _symmetric(mean), _symmetric(se), flows, mode, raw_asym, float(ratio.max()), tail,
        _symmetric(conditional), fit, plus_fit,
    )


def _backward_G(model, bundle, hess, stop, record, start=None):
    """Run the G recursion from the last node down to ``stop``.

    ``record(k, x, G_k, G_{k+1}, Psi)`` is called at every step k >= stop
    after G_k is formed; Psi is the flow product from k to the end.
    """
    h = bundle.grid.step_h
    rho = math.exp(-bundle.grid.discount_r * h)
    M, n = bundle.paths_M, model.state_dim
    G = np.zeros((M, n, n))
    psi = np.broadcast_to(np.eye(n), (M, n, n)).copy()
    for s in bundle.iter_backward(stop if start is None else start, bundle.end_step):
        phi = flow_matrix(model, s.x, s.u, h, s.dw)
        G_next = G
        G = h * hess.raw(s.k, s.x, s.u) + rho * _congruence(phi, G_next)
        psi = psi @ phi if n > 1 else psi * phi
        if s.k >= stop:
            record(s.k, s.x, G, G_next, psi)
    return G


def _tail_magnitude(bundle, k, psi):
    r = bundle.grid.discount_r
    T = bundle.grid.horizon_T
    return float(math.exp(-r * (T - bundle.time(k))) * np.mean(np.sum(psi * psi, axis=(1, 2))))


def estimate_P(
    model: ControlModel,
    bundle: PathBundle,
    hess: HessianOfH,
    t_index: Union[int, Sequence[int]],
    mode: str = "regression",
    basis: RegressionBasis = RegressionBasis(),
    inner_paths: int = 100,
    outer_paths: int = 50,
    seed: Optional[int] = None,
):
    """Estimate P at grid index (or list of indices) ``t_index``.

    Regression mode runs one backward pass over the bundle and projects
    G_k (and rho G_{k+1}) on basis(X_k) at each requested index. Nested
    mode re-simulates ``inner_paths`` continuations from X_k for the first
    ``outer_paths`` bundle paths on a fresh noise stream and averages G_k
    within each group.

    Returns one SecondAdjointEstimate, or a list when given a list.

    Raises
    ------
    InvalidParams, InsufficientInnerPaths, SingularDesignMatrix, propagated simulator errors
    """
    single = np.ndim(t_index) == 0
    steps = [int(t_index)] if single else [int(k) for k in t_index]
    N = bundle.end_step
    for k in steps:
        if not bundle.start_step <= k < N:
            raise InvalidParams(f"t_index {k} outside [{bundle.start_step}, {N})")
    if mode not in MODES:
        raise InvalidParams(f"mode must be one of {MODES}")
    if mode == "nested":
        if inner_paths < 2:
            raise InsufficientInnerPaths("nested conditioning needs at least 2 inner paths per outer path")
        out = [_nested(model, bundle, hess, k, inner_paths, outer_paths, seed) for k in steps]
        return out[0] if single else out

    wanted = set(steps)
    h = bundle.grid.step_h
    rho = math.exp(-bundle.grid.discount_r * h)
    found = {}

    def record(k, x, G, G_next, psi):
        if k not in wanted:
            return
        M, n = G.shape[0], G.shape[1]
        proj = Projector(basis, x)
        sym = _symmetric(G)
        fit = proj.fit(sym.reshape(M, n * n))
        plus_fit = proj.fit((rho * _symmetric(G_next)).reshape(M, n * n))
        cond = proj.fitted(fit).reshape(M, n, n)
        found[k] = _summarize(k * h, k, G, cond, M, "regression", _tail_magnitude(bundle, k, psi), fit, plus_fit)

    _backward_G(model, bundle, hess, min(steps), record)
    out = [found[k] for k in steps]
    return out[0] if single else out


def _nested(model, bundle, hess, k, inner, outer, seed):
    outer = min(outer, bundle.paths_M)
    x_outer = bundle.state(k)[:outer]
    x0 = np.repeat(x_outer, inner, axis=0)
    seed = bundle.seed if seed is None else seed
    cont = simulate_state(
        model, bundle.control, bundle.grid, outer * inner, seed, x0=x0, start_step=k, stream=1_000_003 + k
    )
    inner_hess = HessianOfH(model, cont, hess.adjoint)
    captured = {}

    def record(kk, x, G, G_next, psi):
        if kk == k:
            captured["G"] = G
            captured["psi"] = psi

    _backward_G(model, cont, inner_hess, k, record)
    n = model.state_dim
    G = captured["G"].reshape(outer, inner, n, n)
    cond = G.mean(axis=1)
    tail = _tail_magnitude(cont, k, captured["psi"])
    return _summarize(k * bundle.grid.step_h, k, cond, cond, inner, "nested", tail)


def duality_form(model, bundle, hess, t_index: int, eta, gamma) -> np.ndarray:
    """Pathwise int_t^T e^{-r(s-t)} <D^2 H y^eta, y^gamma> ds from explicit flows."""
    h, r = bundle.grid.step_h, bundle.grid.discount_r
    ye = simulate_linearized_flow(model, bundle, t_index, eta)
    yg = simulate_linearized_flow(model, bundle, t_index, gamma)
    acc = np.zeros(bundle.paths_M)
    for s in bundle.iter_forward(t_index):
        i = s.k - t_index
        D2H = hess.raw(s.k, s.x, s.u)
        acc += h * math.exp(-r * (s.t - bundle.time(t_index))) * np.sum(matvec(D2H, ye[i]) * yg[i], axis=1)
    return acc


@dataclass(frozen=True, eq=False)
class SecondAdjointField:
    """Regression estimates of P at a set of steps, evaluable on any state."""

    estimates: dict

    @classmethod
    def from_estimates(cls, estimates: Sequence[SecondAdjointEstimate]):
        for e in estimates:
            if e.fit is None:
                raise InvalidParams("a P field needs regression-mode estimates")
        return cls({e.step: e for e in estimates})

    def _eval(self, fit, x):
        n = x.shape[1]
        return fit.predict(x).reshape(x.shape[0], n, n)

    def matrix(self, k: int, x: np.ndarray) -> np.ndarray:
        return self._eval(self.estimates[k].fit, x)

    def p_plus_matrix(self, k: int, x: np.ndarray) -> np.ndarray:
        return self._eval(self.estimates[k].plus_fit, x)


# ---------------------------------------------------------------------------
# property checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PPropertiesReport:
    """Boundedness, symmetry and time-continuity diagnostics of P."""

    times: tuple
    mean_sq_norm: tuple
    max_mean_sq_norm: float
    max_raw_asymmetry: float
    max_asymmetry_in_std_errors: float
    eps: tuple
    continuity_modulus: tuple
    continuity_std_errors: tuple
    continuity_decreasing: bool


def check_P_properties(
    estimates: Sequence[SecondAdjointEstimate], eta=None, gamma=None
) -> PPropertiesReport:
    """Report max_t E||P_t||^2, asymmetry and the continuity modulus.

    The first estimate is the base time t; the others give
    E|<(P_{t+eps} - P_t) gamma, eta>| with eps their offsets, computed
    pathwise on the conditional matrices. The modulus must decrease as eps
    shrinks, within 3 std errors.
    """
    if len(estimates) < 3:
        raise InvalidParams("need at least 3 time points")
    n = estimates[0].matrix.shape[0]
    eta = np.eye(n)[0] if eta is None else np.asarray(eta, dtype=float)
    gamma = eta if gamma is None else np.asarray(gamma, dtype=float)
    sq = tuple(float(np.mean(np.sum(e.pathwise**2, axis=(1, 2)))) for e in estimates)
    base = estimates[0]
    base_form = base.pathwise @ eta @ gamma if n > 1 else base.pathwise[:, 0, 0] * eta[0] * gamma[0]
    pairs = []
    for e in estimates[1:]:
        form = e.pathwise @ eta @ gamma if n > 1 else e.pathwise[:, 0, 0] * eta[0] * gamma[0]
        diff = np.abs(form - base_form)
        M = diff.shape[0]
        se = float(diff.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
        pairs.append((e.t - base.t, float(diff.mean()), se))
    pairs.sort(key=lambda p: -p[0])
    eps = tuple(p[0] for p in pairs)
    mod = tuple(p[1] for p in pairs)
    ses = tuple(p[2] for p in pairs)
    decreasing = all(mod[i + 1] <= mod[i] + 3.0 * (ses[i] + ses[i + 1]) for i in range(len(mod) - 1))
    return PPropertiesReport(
        tuple(e.t for e in estimates), sq, max(sq),
        max(e.raw_asymmetry for e in estimates), max(e.asymmetry_in_std_errors for e in estimates),
        eps, mod, ses, decreasing,
    )


def p_field_for_spike(model, bundle, hess, spike: SpikeSpec, basis: RegressionBasis = RegressionBasis()):
    """Regression P field on every grid step covered by ``spike``."""
    k0, k1 = spike.steps(bundle.grid)
    if k1 <= k0:
        return SecondAdjointField({})
    return SecondAdjointField.from_estimates(estimate_P(model, bundle, hess, list(range(k0, k1)), basis=basis))


def check_spike_duality(
    model: ControlModel, bundle: PathBundle, variations: VariationBundle, hess: HessianOfH, field_P: SecondAdjointField
) -> IdentityReport:
    """E int e^{-rs} <D^2 H y, y> ds against sum_j E int_{E_eps} e^{-rs} <P delta sigma^j, delta sigma^j> ds.

    P enters at the right end of each spike step (the weight of the
    increment it generates). The identity holds up to o(epsilon); the
    report's tolerance is 0.
    """
    acc = variations.accumulate(hessian=hess, second=field_P)
    rep = identity_report("spike_duality", acc["spike_lhs"], acc["spike_rhs"], 0.0)
    return rep


@dataclass(frozen=True)
class SpikeLadderReport:
    eps: tuple
    residuals: tuple
    std_errors: tuple
    residual_over_eps: tuple
    decreasing: bool
    reports: tuple


def spike_duality_ladder(
    model, bundle, hess, spike: SpikeSpec, eps_list: Sequence[float], basis: RegressionBasis = RegressionBasis()
) -> SpikeLadderReport:
    """Spike duality residual / epsilon over a ladder; must decrease within noise."""
    eps_list = sorted(eps_list, reverse=True)
    field_P = p_field_for_spike(model, bundle, hess, spike.with_epsilon(eps_list[0]), basis)
    eps, res, ses, reps = [], [], [], []
    for e in eps_list:
        var = simulate_variations(model, bundle, spike.with_epsilon(e), store=False, hessian=hess, second=field_P)
        rep = check_spike_duality(model, bundle, var, hess, field_P)
        eps.append(var.epsilon)
        res.append(abs(rep.diff))
        ses.append(rep.std_err)
        reps.append(rep)
    ratio = tuple(r / e for r, e in zip(res, eps))
    rse = [s / e for s, e in zip(ses, eps)]
    decreasing = all(ratio[i + 1] <= ratio[i] + 3.0 * (rse[i] + rse[i + 1]) for i in range(len(ratio) - 1))
    return SpikeLadderReport(tuple(eps), tuple(res), tuple(ses), ratio, decreasing, tuple(reps))


@dataclass(frozen=True)
class YDynamicsReport:
    """Ito-product consistency of y y^T and the weighted-norm bound.

    ``drift_residual`` is the path average of sum_k |E_k[Y_{k+1}] - Y_k -
    h (A Y + Y A^T + sum_j B^j Y B^j^T + Gamma)|, which is O(h).
    ``path_residual`` is the path average of the largest accumulated
    pathwise residual including the martingale part.
    """

    drift_residual: float
    path_residual: float
    lhs: float
    gamma_term: float
    lambda_term: float
    c_three_halves: float
    K: float
    delta: float
    empirical_K: float
    bound_holds: bool


def bound_constant(r: float, c: float):
    """min over delta of max(1/delta, 1) / (r - 2c - delta); (inf, nan) if r <= 2c."""
    gap = r - 2.0 * c
    if gap <= 0:
        return math.inf, math.nan
    deltas = np.linspace(0, gap, 4001)[1:-1]
    Ks = np.maximum(1.0 / deltas, 1.0) / (gap - deltas)
    i = int(np.argmin(Ks))
    return float(Ks[i]), float(deltas[i])


def check_Y_dynamics(
    model: ControlModel, bundle: PathBundle, variations: VariationBundle, c_three_halves: Optional[float] = None,
    seed: int = 0,
) -> YDynamicsReport:
    """Check the Y = y y^T equation node-wise and its weighted bound."""
    acc = variations.accumulate(track_Y=True)
    c = probe_joint_monotonicity(model, 1.5, seed=seed).c_p_estimate if c_three_halves is None else c_three_halves
    K, delta = bound_constant(bundle.grid.discount_r, c)
    lhs = float(acc["Y_norm"].mean())
    g = float(acc["Gamma_norm"].mean())
    lam = float(acc["Lambda_norm"].mean())
    rhs = g + lam
    emp = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    holds = lhs <= K * rhs * (1 + 1e-12) or lhs == 0.0
    return YDynamicsReport(
        float(acc["Y_drift_residual"].mean()), float(acc["Y_path_residual"].mean()),
        lhs, g, lam, c, K, delta, emp, bool(holds),
    )

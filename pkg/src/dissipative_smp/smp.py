"""Hamiltonian, H-function and the necessary-condition checker.

For a candidate (X-bar, u-bar) with adjoints (p, q) and second adjoint P the
necessary condition reads, for every v in the control set,

    H(X-bar, v, p, q) - H(X-bar, u-bar, p, q)
        + 1/2 sum_j <P (sigma^j(X-bar, v) - sigma^j(X-bar, u-bar)), same> <= 0.

The left side equals h(X-bar, v) - h(X-bar, u-bar) for the H-function h, so
the condition says u-bar maximizes h(X-bar, .).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adjoint import AdjointSolution, solve_first_adjoint
from .controls import ControlLaw
from .errors import EmptyControlGrid, InvalidParams
from .models import ControlModel, ControlSet
from .regression import RegressionBasis
from .sde import PathBundle, TimeGrid, fmt, simulate_state
from .second_adjoint import estimate_P, hessian_H

REPORT_FIELDS = ("t", "v", "lhs", "std_err", "verdict")
VERDICTS = ("satisfied", "violated", "inconclusive")


def _rows(a, M, *shape):
    a = np.asarray(a, dtype=float)
    return np.broadcast_to(a.reshape((-1,) + shape), (M,) + shape)


def trace_pairing(q: np.ndarray, sig: np.ndarray) -> np.ndarray:
    """Tr[q^T sigma] per row for q, sigma of shape (M, n, d)."""
    return np.einsum("mij,mij->m", q, sig)


def hamiltonian(model: ControlModel, x, u, p, q) -> np.ndarray:
    """<p, b(x,u)> + Tr[q^T sigma(x,u)] - f(x,u), shape (M,)."""
    n, d, kdim = model.state_dim, model.noise_dim, model.control_dim
    x = np.atleast_2d(np.asarray(x, dtype=float)).reshape(-1, n)
    M = max(x.shape[0], np.asarray(u).reshape(-1, kdim).shape[0], np.asarray(p).reshape(-1, n).shape[0])
    x = _rows(x, M, n)
    u = _rows(u, M, kdim)
    p = _rows(p, M, n)
    q = _rows(q, M, n, d)
    return np.sum(p * model.b(x, u), axis=1) + trace_pairing(q, model.sigma(x, u)) - model.f(x, u)


@dataclass(frozen=True)
class Anchor:
    """Reference point (X-bar_t, u-bar_t, p_t, q_t, P_t), single or per path."""

    x: np.ndarray
    u: np.ndarray
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray

    def rows(self, model: ControlModel):
        n, d, kdim = model.state_dim, model.noise_dim, model.control_dim
        M = max(np.asarray(a).size // s for a, s in ((self.x, n), (self.u, kdim), (self.p, n), (self.q, n * d), (self.P, n * n)))
        return (
            _rows(self.x, M, n), _rows(self.u, M, kdim), _rows(self.p, M, n),
            _rows(self.q, M, n, d), _rows(self.P, M, n, n),
        )


def _p_quadratic(P, a):
    """sum_j <P a^j, a^j> for a of shape (M, n, d)."""
    return np.einsum("mil,mlj,mij->m", P, a, a)


def h_function(model: ControlModel, x, u, anchor: Anchor) -> np.ndarray:
    """H(x,u,p,q) - Tr[sig-bar^T P sig-bar]/2 + Tr[(sig - sig-bar)^T P (sig - sig-bar)]/2."""
    xb, ub, p, q, P = anchor.rows(model)
    M = xb.shape[0]
    x = _rows(x, M, model.state_dim)
    u = _rows(u, M, model.control_dim)
    sig_bar = model.sigma(xb, ub)
    gap = model.sigma(x, u) - sig_bar
    return hamiltonian(model, x, u, p, q) - 0.5 * _p_quadratic(P, sig_bar) + 0.5 * _p_quadratic(P, gap)


def smp_lhs(model: ControlModel, anchor: Anchor, v) -> np.ndarray:
    """Pathwise left side of the variational inequality at control point v."""
    xb, ub, p, q, P = anchor.rows(model)
    vv = _rows(v, xb.shape[0], model.control_dim)
    dH = hamiltonian(model, xb, vv, p, q) - hamiltonian(model, xb, ub, p, q)
    gap = model.sigma(xb, vv) - model.sigma(xb, ub)
    return dH + 0.5 * _p_quadratic(P, gap)


def argmax_h(model: ControlModel, anchor: Anchor, grid) -> np.ndarray:
    """Grid point maximizing the H-function; ties go to the smallest grid index.

    ``grid`` is a ControlSet or an array of points (K, k). With a
    per-path anchor the result has one row per path.
    """
    pts = grid.points if isinstance(grid, ControlSet) else np.asarray(grid, dtype=float)
    if pts.size == 0:
        raise EmptyControlGrid("control grid is empty")
    pts = pts.reshape(len(pts), -1)
    xb = anchor.rows(model)[0]
    vals = np.stack([h_function(model, xb, v, anchor) for v in pts], axis=1)
    idx = np.argmax(vals, axis=1)
    out = pts[idx]
    return out[0] if out.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# the checker
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SMPEntry:
    t: float
    v: np.ndarray
    lhs: float
    std_err: float
    verdict: str
    fraction_positive: float


@dataclass(frozen=True)
class SMPReport:
    """Per (t, v) verdicts and per-time H-function maximality summary.

    ``argmax`` maps t to the grid point maximizing the path-averaged
    H-function; ``argmax_agreement`` to the fraction of paths whose own
    maximizer lies within one grid spacing of u-bar_t.
    """

    entries: tuple
    tolerance: float
    paths_M: int
    argmax: dict
    argmax_agreement: dict
    mean_control: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def violations(self) -> list:
        return [e for e in self.entries if e.verdict == "violated"]

    @property
    def worst(self) -> SMPEntry:
        return max(self.entries, key=lambda e: e.lhs)

    def counts(self) -> dict:
        return {v: sum(e.verdict == v for e in self.entries) for v in VERDICTS}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for e in self.entries:
                v = fmt(e.v[0]) if e.v.size == 1 else " ".join(fmt(c) for c in e.v)
                w.writerow([fmt(e.t), v, fmt(e.lhs), fmt(e.std_err), e.verdict])

    def summary_text(self) -> str:
        c = self.counts()
        worst = self.worst
        lines = [
            f"paths_M={self.paths_M}",
            f"tolerance={fmt(self.tolerance)}",
            f"satisfied={c['satisfied']}",
            f"violated={c['violated']}",
            f"inconclusive={c['inconclusive']}",
            f"worst_t={fmt(worst.t)}",
            "worst_v=" + " ".join(fmt(x) for x in worst.v),
            f"worst_lhs={fmt(worst.lhs)}",
            f"worst_std_err={fmt(worst.std_err)}",
        ]
        for t in sorted(self.argmax):
            lines.append(f"argmax[t={fmt(t)}]=" + " ".join(fmt(x) for x in self.argmax[t]))
            lines.append(f"mean_control[t={fmt(t)}]=" + " ".join(fmt(x) for x in self.mean_control[t]))
            lines.append(f"argmax_agreement[t={fmt(t)}]={fmt(self.argmax_agreement[t])}")
        return "\n".join(lines) + "\n"


def verdict(lhs: float, se: float, tolerance: float) -> str:
    """violated if lhs > 3 se + tol; inconclusive if |lhs| <= 3 se with se > 0; else satisfied."""
    if lhs > 3.0 * se + tolerance:
        return "violated"
    if se > 0 and abs(lhs) <= 3.0 * se:
        return "inconclusive"
    return "satisfied"


def _spacing(points: np.ndarray) -> float:
    if points.shape[0] < 2:
        return 0.0
    diffs = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    diffs[diffs == 0] = np.inf
    return float(diffs.min(axis=1).max())


def check_smp(
    model: ControlModel,
    candidate: ControlLaw,
    times: Sequence[float],
    M: int,
    seed: int,
    grid: TimeGrid,
    tolerance: Optional[float] = None,
    control_points=None,
    basis: RegressionBasis = RegressionBasis(),
    picard_sweeps: int = 1,
    bundle: Optional[PathBundle] = None,
    adjoint: Optional[AdjointSolution] = None,
    workers: int = 1,
) -> SMPReport:
    """Simulate, solve (p, q), estimate P and test the inequality at each (t, v).

    ``times`` are times on ``grid`` (rounded to the nearest node).
    ``control_points`` default to the model's control set. The default
    tolerance is 1e-3 (1 + mean |H(X-bar, u-bar, p, q)|) over the checked
    times. A precomputed ``bundle`` (and ``adjoint``) may be passed.

    Raises
    ------
    EmptyControlGrid, InvalidParams, propagated pipeline errors
    """
    pts = model.control_set.points if control_points is None else np.asarray(control_points, dtype=float)
    pts = pts.reshape(pts.shape[0], -1) if pts.size else pts.reshape(0, model.control_dim)
    if pts.shape[0] == 0:
        raise EmptyControlGrid("control grid is empty")
    if pts.shape[1] != model.control_dim:
        raise InvalidParams("control points have the wrong dimension")
    steps = [grid.index(t) for t in times]
    if bundle is None:
        bundle = simulate_state(model, candidate, grid, M, seed, workers=workers)
    if adjoint is None:
        adjoint = solve_first_adjoint(model, bundle, basis, None, picard_sweeps)
    hess = hessian_H(model, bundle, adjoint)
    ests = estimate_P(model, bundle, hess, steps, basis=basis)
    anchors = {}
    h_scale = []
    for k, est in zip(steps, ests):
        x = bundle.state(k)
        u = bundle.control_at(k, x)
        p = adjoint.p(k, x, u)
        q = adjoint.q(k, x)
        anchors[k] = Anchor(x, u, p, q, est.pathwise)
        h_scale.append(float(np.mean(np.abs(hamiltonian(model, x, u, p, q)))))
    tol = 1e-3 * (1.0 + float(np.mean(h_scale))) if tolerance is None else float(tolerance)
    entries = []
    argmax, agreement, mean_u = {}, {}, {}
    spacing = _spacing(pts)
    Mp = bundle.paths_M
    for k in steps:
        anc = anchors[k]
        t = bundle.time(k)
        means = []
        for v in pts:
            lhs = smp_lhs(model, anc, v)
            m = float(lhs.mean())
            se = float(lhs.std(ddof=1) / math.sqrt(Mp)) if Mp > 1 else 0.0
            frac = float(np.mean(lhs > tol))
            entries.append(SMPEntry(t, v.copy(), m, se, verdict(m, se, tol), frac))
            means.append(m)
        argmax[t] = pts[int(np.argmax(means))]
        own = argmax_h(model, anc, pts).reshape(-1, model.control_dim)
        dist = np.linalg.norm(own - anc.u, axis=1)
        agreement[t] = float(np.mean(dist <= spacing * (1 + 1e-9)))
        mean_u[t] = anc.u.mean(axis=0)
    diag = {
        "adjoint_min_r2": float(np.min(adjoint.r2_mean)) if adjoint.r2_mean.size else 1.0,
        "adjoint_low_r2_steps": int(adjoint.low_r2_steps().size),
        "max_P_asymmetry_in_std_errors": max(e.asymmetry_in_std_errors for e in ests),
    }
    return SMPReport(tuple(entries), tol, Mp, argmax, agreement, mean_u, diag)

"""Forward Monte Carlo for the controlled state and for linear SDEs.

The state equation is integrated by a split-step drift-implicit Euler
scheme: a damped Newton solve of ``y - h b(y, u) = x`` followed by the
explicit diffusion increment ``x' = y + sigma(y, u) dW``. Linear and
linearized SDEs use explicit Euler on the same Brownian increments.

Brownian increments come from one generator per fine step, seeded by
hashing ``(seed, stream, step index)``, so any step can be regenerated on
demand and the first M paths never depend on how many paths
are simulated in total. Large bundles keep only periodic state checkpoints
and replay segments when a backward sweep needs them.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np

from .controls import ControlLaw
from .errors import InvalidParams, NewtonDivergence, NonFiniteState
from .models import ControlModel, MonotonicityReport, probe_joint_monotonicity

NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-12
DEFAULT_TAIL_TOLERANCE = 1e-6
DEFAULT_MEMORY_BUDGET = 256 * 2**20


# ---------------------------------------------------------------------------
# grid and noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with the discount rate that weights it.

    ``noise_substeps`` draws each Brownian increment as the sum of that
    many finer increments, so grids with h and h/2 (and substeps s and
    s/2) see the same Brownian path.
    """

    horizon_T: float
    step_h: float
    discount_r: float
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE
    noise_substeps: int = 1

    def __post_init__(self):
        if not (self.horizon_T > 0 and self.step_h > 0):
            raise InvalidParams("grid needs T > 0 and h > 0")
        if self.step_h > self.horizon_T * (1 + 1e-12):
            raise InvalidParams("grid needs h <= T")
        if not self.discount_r > 0:
            raise InvalidParams("discount rate must be positive")
        if self.noise_substeps < 1:
            raise InvalidParams("noise_substeps must be at least 1")
        if math.exp(-self.discount_r * self.horizon_T) > self.tail_tolerance * (1 + 1e-9):
            raise InvalidParams(
                f"e^(-rT) = {math.exp(-self.discount_r * self.horizon_T):.3e} exceeds "
                f"tail_tolerance {self.tail_tolerance:.3e}; lengthen T or relax the tolerance"
            )

    @classmethod
    def for_tail(cls, discount_r: float, step_h: float, tail_tolerance: float = DEFAULT_TAIL_TOLERANCE, **kw):
        """Shortest grid with e^(-rT) <= tail_tolerance and T a multiple of h."""
        horizon = math.log(1.0 / tail_tolerance) / discount_r
        steps = math.ceil(horizon / step_h - 1e-9)
        return cls(steps * step_h, step_h, discount_r, tail_tolerance, **kw)

    @property
    def steps(self) -> int:
        return int(math.ceil(self.horizon_T / self.step_h - 1e-9))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.step_h

    @property
    def tail_weight(self) -> float:
        return math.exp(-self.discount_r * self.horizon_T)

    def index(self, t: float) -> int:
        """Nearest node index to time t."""
        k = int(round(t / self.step_h))
        if not 0 <= k <= self.steps:
            raise InvalidParams(f"time {t} lies outside the grid")
        return k


@dataclass(frozen=True)
class NoiseSource:
    """Regenerable Brownian increments keyed by (seed, stream, fine step).

    Each fine step owns an independent generator seeded by hashing the
    key triple, so any step can be regenerated in any order.
    """

    seed: int
    noise_dim: int
    step_h: float
    substeps: int = 1
    stream: int = 0

    def increments(self, k: int, M: int) -> np.ndarray:
        """Increments W_{t_{k+1}} - W_{t_k} for M paths, shape (M, d)."""
        total = None
        for i in range(self.substeps):
            key = np.random.SeedSequence([self.seed % 2**63, self.stream % 2**63, k * self.substeps + i])
            z = np.random.Generator(np.random.SFC64(key)).standard_normal((M, self.noise_dim))
            total = z if total is None else total + z
        return total * math.sqrt(self.step_h / self.substeps)


# ---------------------------------------------------------------------------
# the split-step scheme
# ---------------------------------------------------------------------------


def _residual(model, y, x, u, h):
    return y - h * model.drift(y, u) - x


def _norm(v):
    if v.shape[1] == 1:
        return np.abs(v[:, 0])
    return np.sqrt(np.sum(v * v, axis=1))


def _newton_update(model, y, u, h, res):
    n = y.shape[1]
    jac = model.b_x(y, u)
    if n == 1:
        return res / (1.0 - h * jac[:, 0, :])
    lhs = np.eye(n) - h * jac
    return np.linalg.solve(lhs, res[..., None])[..., 0]


def _bisection(model, x, u, h):
    """Monotone 1-d solve of y - h b(y, u) = x by bracketing."""
    lo = x.copy()
    hi = x.copy()
    width = np.maximum(1.0, np.abs(x))
    g_lo = _residual(model, lo, x, u, h)
    g_hi = g_lo.copy()
    for _ in range(200):
        bad_lo = ~(g_lo <= 0)
        bad_hi = ~(g_hi >= 0)
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, lo - width, lo)
        hi = np.where(bad_hi, hi + width, hi)
        width = width * 2.0
        g_lo = _residual(model, lo, x, u, h)
        g_hi = _residual(model, hi, x, u, h)
    else:
        raise NewtonDivergence("bisection could not bracket the implicit drift root")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g_mid = _residual(model, mid, x, u, h)
        neg = g_mid <= 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    return 0.5 * (lo + hi)


def implicit_drift_solve(model: ControlModel, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """Solve y - h b(y, u) = x path by path with damped Newton.

    Converged when the residual norm is at most 1e-12 (1 + |x|). Paths
    still unconverged after 50 iterations fall back to bisection in one
    dimension; otherwise NewtonDivergence is raised.
    """
    y = x.copy()
    res = _residual(model, y, x, u, h)
    tol = NEWTON_TOL * (1.0 + _norm(x))
    rnorm = _norm(res)
    active = ~(rnorm <= tol)
    for _ in range(NEWTON_MAX_ITER):
        if not active.any():
            return y
        full = bool(active.all())
        idx = slice(None) if full else np.nonzero(active)[0]
        ya, ua, xa, ra, na = y[idx], u[idx], x[idx], res[idx], rnorm[idx]
        step = _newton_update(model, ya, ua, h, ra)
        lam = np.ones(ya.shape[0])
        trial = ya - step
        with np.errstate(all="ignore"):
            rt = _residual(model, trial, xa, ua, h)
            nt = _norm(rt)
            for _ in range(30):
                worse = ~(nt < na) & ~(nt <= tol[idx])
                if not worse.any():
                    break
                lam = np.where(worse, 0.5 * lam, lam)
                w = np.nonzero(worse)[0]
                trial[w] = ya[w] - lam[w, None] * step[w]
                rt[w] = _residual(model, trial[w], xa[w], ua[w], h)
                nt[w] = _norm(rt[w])
        if full:
            y, res, rnorm = trial, rt, nt
        else:
            y[idx] = trial
            res[idx] = rt
            rnorm[idx] = nt
        active = ~(rnorm <= tol)
    if not active.any():
        return y
    if x.shape[1] == 1:
        w = np.nonzero(active)[0]
        y[w] = _bisection(model, x[w], u[w], h)
        return y
    raise NewtonDivergence(
        f"implicit drift solve failed on {int(active.sum())} paths after {NEWTON_MAX_ITER} iterations; "
        "the step is too large for the drift's stiffness"
    )


def diffusion_increment(sig: np.ndarray, dw: np.ndarray) -> np.ndarray:
    """sum_j sigma[:, :, j] dW_j, summed in a fixed order."""
    out = sig[:, :, 0] * dw[:, 0:1]
    for j in range(1, dw.shape[1]):
        out = out + sig[:, :, j] * dw[:, j : j + 1]
    return out


def split_step(model: ControlModel, x: np.ndarray, u: np.ndarray, h: float, dw: np.ndarray) -> np.ndarray:
    """One step of the split-step drift-implicit Euler scheme."""
    y = implicit_drift_solve(model, x, u, h)
    return y + diffusion_increment(model.diffusion(y, u), dw)


def _chunked(fn, arrays, workers: int):
    """Apply a per-path map in path chunks; identical output for any worker count."""
    M = arrays[0].shape[0]
    if workers <= 1 or M < 2 * workers:
        return fn(*arrays)
    bounds = np.linspace(0, M, workers + 1).astype(int)
    parts = [tuple(a[lo:hi] for a in arrays) for lo, hi in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda p: fn(*p), parts))
    return np.concatenate(results, axis=0)


# ---------------------------------------------------------------------------
# path bundles
# ---------------------------------------------------------------------------


class Step(NamedTuple):
    """State, control and increment at one grid step (x is X_k)."""

    k: int
    t: float
    x: np.ndarray
    u: np.ndarray
    dw: np.ndarray


@dataclass(frozen=True, eq=False)
class PathBundle:
    """M aligned trajectories under one control law.

    States are node-indexed by the global step k in [start_step, steps].
    Either every node is stored (``states`` not None) or only every
    ``stride``-th node, in which case segments are replayed on demand.
    Controls are recomputed from the law, which is pure.
    """

    model: ControlModel
    control: ControlLaw
    grid: TimeGrid
    paths_M: int
    seed: int
    noise: NoiseSource
    start_step: int
    stride: int
    checkpoints: dict
    states: Optional[np.ndarray] = None
    stored_dw: Optional[np.ndarray] = None
    workers: int = 1

    @property
    def end_step(self) -> int:
        return self.grid.steps

    @property
    def dim(self) -> int:
        return self.model.state_dim

    def time(self, k: int) -> float:
        return k * self.grid.step_h

    def dw(self, k: int) -> np.ndarray:
        if self.stored_dw is not None:
            return self.stored_dw[k - self.start_step]
        return self.noise.increments(k, self.paths_M)

    def control_at(self, k: int, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.control.evaluate(k, self.time(k), x), dtype=float).reshape(
            x.shape[0], self.model.control_dim
        )

    def advance(self, k: int, x: np.ndarray):
        """Return (X_{k+1}, u_k, dW_k) from X_k."""
        u = self.control_at(k, x)
        dw = self.dw(k)
        h = self.grid.step_h
        nxt = _chunked(lambda a, b, c: split_step(self.model, a, b, h, c), (x, u, dw), self.workers)
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteState(f"non-finite state at step {k + 1} (t = {self.time(k + 1):.6g})")
        return nxt, u, dw

    def state(self, k: int) -> np.ndarray:
        """X_k for all paths."""
        if not self.start_step <= k <= self.end_step:
            raise InvalidParams(f"step {k} outside bundle range")
        if self.states is not None:
            return self.states[k - self.start_step]
        c = self.start_step + ((k - self.start_step) // self.stride) * self.stride
        x = self.checkpoints[c]
        for j in range(c, k):
            x, _, _ = self.advance(j, x)
        return x

    def iter_forward(self, start: Optional[int] = None, stop: Optional[int] = None) -> Iterator[Step]:
        """Yield steps k = start, ..., stop - 1 in increasing order."""
        start = self.start_step if start is None else start
        stop = self.end_step if stop is None else stop
        h = self.grid.step_h
        if self.states is not None:
            for k in range(start, stop):
                x = self.states[k - self.start_step]
                yield Step(k, k * h, x, self.control_at(k, x), self.dw(k))
            return
        x = self.state(start)
        for k in range(start, stop):
            nxt, u, dw = self.advance(k, x)
            yield Step(k, k * h, x, u, dw)
            x = nxt

    def iter_backward(self, start: Optional[int] = None, stop: Optional[int] = None) -> Iterator[Step]:
        """Yield steps k = stop - 1, ..., start in decreasing order."""
        start = self.start_step if start is None else start
        stop = self.end_step if stop is None else stop
        h = self.grid.step_h
        if self.states is not None:
            for k in range(stop - 1, start - 1, -1):
                x = self.states[k - self.start_step]
                yield Step(k, k * h, x, self.control_at(k, x), self.dw(k))
            return
        seg_hi = stop
        while seg_hi > start:
            c = self.start_step + ((seg_hi - 1 - self.start_step) // self.stride) * self.stride
            lo = max(c, start)
            buf = []
            x = self.checkpoints[c]
            for k in range(c, seg_hi):
                nxt, u, dw = self.advance(k, x)
                if k >= lo:
                    buf.append(Step(k, k * h, x, u, dw))
                x = nxt
            yield from reversed(buf)
            seg_hi = lo

    def states_array(self, budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
        """All node states, shape (nodes, M, n); refuses beyond ``budget`` bytes."""
        if self.states is not None:
            return self.states
        nodes = self.end_step - self.start_step + 1
        if nodes * self.paths_M * self.dim * 8 > budget:
            raise InvalidParams("bundle too large to materialize; iterate instead")
        out = np.empty((nodes, self.paths_M, self.dim))
        for s in self.iter_forward():
            out[s.k - self.start_step] = s.x
        out[-1] = self.state(self.end_step)
        return out

    def to_csv(self, path, paths: Optional[Sequence[int]] = None):
        """Write path_id, step, t, x_1..x_n, u columns (u_1..u_k if k > 1)."""
        states = self.states_array()
        ids = range(self.paths_M) if paths is None else paths
        n, kdim = self.dim, self.model.control_dim
        header = ["path_id", "step", "t"] + [f"x_{i + 1}" for i in range(n)]
        header += ["u"] if kdim == 1 else [f"u_{i + 1}" for i in range(kdim)]
        controls = [self.control_at(k, states[k - self.start_step]) for k in range(self.start_step, self.end_step + 1)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for pid in ids:
                for k in range(self.start_step, self.end_step + 1):
                    i = k - self.start_step
                    row = [pid, k, fmt(self.time(k))]
                    row += [fmt(v) for v in states[i, pid]]
                    row += [fmt(v) for v in controls[i][pid]]
                    w.writerow(row)


def fmt(value) -> str:
    """Decimal with 17 significant digits, the package-wide CSV format."""
    return format(float(value), ".17g")


def simulate_state(
    model: ControlModel,
    control: ControlLaw,
    grid: TimeGrid,
    M: int,
    seed: int,
    x0=None,
    start_step: int = 0,
    stream: int = 0,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
    workers: int = 1,
) -> PathBundle:
    """Simulate M paths of the controlled state on ``grid``.

    Parameters
    ----------
    x0 : array, optional
        Initial state, shape (n,) or per path (M, n). Defaults to model.x0.
    start_step : int
        Global step of the initial node, used for continuation bundles.
    stream : int
        Noise stream id; distinct streams give independent Brownian paths.
    memory_budget : int
        Bytes allowed for storing every node; larger bundles keep
        checkpoints every ~sqrt(steps) nodes and replay segments.

    Raises
    ------
    NewtonDivergence, NonFiniteState
    """
    if M < 1:
        raise InvalidParams("M must be at least 1")
    if not 0 <= start_step < grid.steps:
        raise InvalidParams("start_step must lie before the last node")
    n = model.state_dim
    x = model.x0 if x0 is None else np.asarray(x0, dtype=float)
    x = np.array(np.broadcast_to(x.reshape(-1, n), (M, n)), dtype=float)
    noise = NoiseSource(seed, model.noise_dim, grid.step_h, grid.noise_substeps, stream)
    nodes = grid.steps - start_step + 1
    full = nodes * M * (n + model.noise_dim) * 8 <= memory_budget
    stride = 1 if full else max(1, int(math.ceil(math.sqrt(nodes))))
    proto = PathBundle(model, control, grid, M, seed, noise, start_step, stride, {}, None, None, workers)
    states = np.empty((nodes, M, n)) if full else None
    dws = np.empty((nodes - 1, M, model.noise_dim)) if full else None
    checkpoints = {}
    for k in range(start_step, grid.steps):
        i = k - start_step
        if full:
            states[i] = x
        elif i % stride == 0:
            checkpoints[k] = x.copy()
        x, _, dw = proto.advance(k, x)
        if full:
            dws[i] = dw
    if full:
        states[-1] = x
    checkpoints[grid.steps] = x
    return PathBundle(model, control, grid, M, seed, noise, start_step, stride, checkpoints, states, dws, workers)


def noise_diagnostics(bundle: PathBundle, steps: Optional[Sequence[int]] = None) -> dict:
    """Worst normalized mean and relative variance error of dW over steps."""
    steps = range(bundle.start_step, bundle.end_step) if steps is None else steps
    h, M = bundle.grid.step_h, bundle.paths_M
    worst_mean, worst_var = 0.0, 0.0
    for k in steps:
        dw = bundle.dw(k)
        worst_mean = max(worst_mean, float(np.max(np.abs(dw.mean(axis=0)))) / (np.sqrt(h) / np.sqrt(M)))
        worst_var = max(worst_var, float(np.max(np.abs(dw.var(axis=0) / h - 1.0))))
    return {"mean_in_std_units": worst_mean, "variance_rel_error": worst_var}


# ---------------------------------------------------------------------------
# moment envelope and cost
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentEnvelope:
    """Bound E|X_t|^2 <= e^{lam t} |x0|^2 + kappa (e^{lam t} - 1) / lam.

    With b(0, u) = 0 and sigma(0, u) = 0 on the control set, kappa = 0 and
    lam = 2 c_{1/2}. Otherwise lam = 2 c_1 + 1 and
    kappa = sup_u |b(0,u)|^2 + 2 ||sigma(0,u)||^2.
    """

    lam: float
    kappa: float
    x0_sq: float

    def second_moment(self, t):
        t = np.asarray(t, dtype=float)
        growth = np.exp(self.lam * t)
        if self.kappa == 0.0:
            return self.x0_sq * growth
        if abs(self.lam) < 1e-14:
            return self.x0_sq + self.kappa * t
        return self.x0_sq * growth + self.kappa * np.expm1(self.lam * t) / self.lam

    def weighted(self, t, r: float):
        """e^{-rt} times the second-moment bound."""
        return np.exp(-r * np.asarray(t, dtype=float)) * self.second_moment(t)

    def tail_integral(self, T: float, r: float) -> float:
        """int_T^inf e^{-rt} bound(t) dt, infinite unless r > lam."""
        if r <= self.lam:
            return math.inf
        a = r - self.lam
        value = self.x0_sq * math.exp(-a * T) / a
        if self.kappa:
            if abs(self.lam) < 1e-14:
                value += self.kappa * math.exp(-r * T) * (T / r + 1.0 / r**2)
            else:
                value += self.kappa / self.lam * (math.exp(-a * T) / a - math.exp(-r * T) / r)
        return value


def moment_envelope(
    model: ControlModel,
    x0=None,
    reports: Sequence[MonotonicityReport] = (),
    seed: int = 0,
    scaled_exponent: bool = False,
) -> MomentEnvelope:
    """Second-moment envelope from probed monotonicity constants.

    ``scaled_exponent=True`` multiplies the exponent by
    K = max{c + 1/2, 1}; with r > 2c that envelope is tighter than what
    the Gronwall argument supports, so the default keeps K = 1.
    """
    x0 = model.x0 if x0 is None else np.asarray(x0, dtype=float)
    x0_sq = float(np.max(np.sum(np.reshape(x0, (-1, model.state_dim)) ** 2, axis=1)))
    zeros = np.zeros((model.control_set.size, model.state_dim))
    pts = model.control_set.points
    kappa = float(
        np.max(np.sum(model.b(zeros, pts) ** 2, axis=1) + 2.0 * np.sum(model.sigma(zeros, pts) ** 2, axis=(1, 2)))
    )
    known = {rep.p: rep.c_p_estimate for rep in reports}
    if kappa == 0.0:
        c = known.get(0.5)
        if c is None:
            c = probe_joint_monotonicity(model, 0.5, seed=seed).c_p_estimate
        factor = max(c + 0.5, 1.0) if scaled_exponent else 1.0
        return MomentEnvelope(2.0 * factor * c, 0.0, x0_sq)
    c = known.get(1.0)
    if c is None:
        c = probe_joint_monotonicity(model, 1.0, seed=seed).c_p_estimate
    return MomentEnvelope(2.0 * c + 1.0, kappa, x0_sq)


@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo estimate of the truncated discounted cost."""

    value: float
    std_error: float
    paths_M: int
    tail_bound: float
    pathwise: Optional[np.ndarray] = field(default=None, repr=False)


def cost_tail_bound(model: ControlModel, bundle: PathBundle, seed: int = 0) -> float:
    """Bound on int_T^inf e^{-rt} E|f(X_t, u_t)| dt.

    Uses |f(x,u)| <= C_f (1 + |x|^l) fitted on the model box and control
    set, E|X|^l <= 1 + E|X|^2 for l <= 2 and the second-moment envelope.
    Returns inf when l > 2 or the discount does not beat the envelope rate.
    """
    l = model.growth_l
    if l > 2:
        return math.inf
    rng = np.random.default_rng(seed)
    xs = model.box.sample(rng, 4096)
    pts = model.control_set.points
    c_f = 0.0
    for u in pts:
        vals = np.abs(model.f(xs, u.reshape(1, -1))) / (1.0 + np.linalg.norm(xs, axis=1) ** l)
        c_f = max(c_f, float(vals.max()))
    x0 = bundle.state(bundle.start_step)
    env = moment_envelope(model, x0, seed=seed)
    T, r = bundle.grid.horizon_T, bundle.grid.discount_r
    t0 = bundle.time(bundle.start_step)
    return c_f * (2.0 * math.exp(-r * T) / r + math.exp(-r * t0) * env.tail_integral(T - t0, r))


def estimate_cost(model: ControlModel, bundle: PathBundle, tail: bool = True) -> CostEstimate:
    """Left-endpoint quadrature of E int_0^T e^{-rt} f(X_t, u_t) dt."""
    h, r = bundle.grid.step_h, bundle.grid.discount_r
    acc = np.zeros(bundle.paths_M)
    for s in bundle.iter_forward():
        acc += h * math.exp(-r * s.t) * model.f(s.x, s.u)
    M = bundle.paths_M
    se = float(acc.std(ddof=1) / math.sqrt(M)) if M > 1 else 0.0
    bound = cost_tail_bound(model, bundle) if tail else math.nan
    return CostEstimate(float(acc.mean()), se, M, bound, acc)


def estimate_weighted_moment(bundle: PathBundle, q: float, r: float) -> float:
    """Monte Carlo estimate of E int_0^T e^{-rqt} |X_t|^{2q} dt."""
    if q < 0.5:
        raise InvalidParams("q must be at least 1/2")
    if r <= 0:
        raise InvalidParams("r must be positive")
    h = bundle.grid.step_h
    acc = np.zeros(bundle.paths_M)
    for s in bundle.iter_forward():
        acc += h * math.exp(-r * q * s.t) * np.sum(s.x * s.x, axis=1) ** q
    return float(acc.mean())


def weighted_moment_profile(bundle: PathBundle, r: float, q: float = 1.0):
    """Per-node mean and standard error of e^{-rqt} |X_t|^{2q}.

    Returns (times, mean, std_error), one entry per node.
    """
    times, means, ses = [], [], []
    M = bundle.paths_M

    def record(t, x):
        vals = math.exp(-r * q * t) * np.sum(x * x, axis=1) ** q
        times.append(t)
        means.append(vals.mean())
        ses.append(vals.std(ddof=1) / math.sqrt(M) if M > 1 else 0.0)

    for s in bundle.iter_forward():
        record(s.t, s.x)
    record(bundle.time(bundle.end_step), bundle.state(bundle.end_step))
    return np.array(times), np.array(means), np.array(ses)


# ---------------------------------------------------------------------------
# linear SDEs
# ---------------------------------------------------------------------------

Coefficient = Union[None, np.ndarray, Callable[[Step], np.ndarray]]


def matvec(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Batched A @ y for A of shape (M, n, n) or (n, n) and y of shape (M, n)."""
    if A.ndim == 2:
        return y @ A.T
    if A.shape[-1] == 1:
        return A[:, :, 0] * y
    return np.einsum("mil,ml->mi", A, y)


def _coef(c: Coefficient, step: Step):
    if c is None:
        return None
    if callable(c):
        return c(step)
    return c


def linear_euler_step(y, h, dw, A=None, B=None, alpha=None, beta=None):
    """y + (A y + alpha) h + sum_j (B^j y + beta^j) dW^j.

    B has shape (d, n, n) or (M, d, n, n); beta has shape (d, n) or (M, d, n).
    """
    drift = np.zeros_like(y) if A is None else matvec(A, y)
    if alpha is not None:
        drift = drift + alpha
    out = y + h * drift
    for j in range(dw.shape[1]):
        term = None
        if B is not None:
            Bj = B[j] if B.ndim == 3 else B[:, j]
            term = matvec(Bj, y)
        if beta is not None:
            bj = beta[j] if beta.ndim == 2 else beta[:, j]
            term = bj if term is None else term + bj
        if term is not None:
            out = out + term * dw[:, j : j + 1]
    return out


def simulate_linear_sde(
    A: Coefficient,
    B: Coefficient,
    alpha: Coefficient,
    beta: Coefficient,
    y0,
    bundle: PathBundle,
    start_step: Optional[int] = None,
) -> np.ndarray:
    """Explicit Euler for dY = (A Y + alpha) dt + sum_j (B^j Y + beta^j) dW^j.

    Coefficients are constants, per-path arrays, or callables of a
    ``Step``; the bundle's increments are reused. Returns the node grid of
    shape (nodes, M, n) from ``start_step`` to the end of the bundle.
    """
    start = bundle.start_step if start_step is None else start_step
    M, n = bundle.paths_M, bundle.dim
    y = np.array(np.broadcast_to(np.asarray(y0, dtype=float).reshape(-1, n), (M, n)), dtype=float)
    out = np.empty((bundle.end_step - start + 1, M, n))
    out[0] = y
    h = bundle.grid.step_h
    for s in bundle.iter_forward(start):
        y = linear_euler_step(y, h, s.dw, _coef(A, s), _coef(B, s), _coef(alpha, s), _coef(beta, s))
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"linear SDE blew up at step {s.k + 1}")
        out[s.k + 1 - start] = y
    return out


def simulate_linearized_flow(model: ControlModel, bundle: PathBundle, t_index: int, eta) -> np.ndarray:
    """Flow of dy = D_x b y ds + sum_j D_x sigma^j y dW^j from y_t = eta.

    Returns the node grid on [t, T], shape (steps - t_index + 1, M, n).
    """
    if not bundle.start_step <= t_index <= bundle.end_step:
        raise InvalidParams("t_index outside the bundle")
    return simulate_linear_sde(
        lambda s: model.b_x(s.x, s.u),
        lambda s: model.sigma_x(s.x, s.u),
        None,
        None,
        eta,
        bundle,
        start_step=t_index,
    )

"""Controlled SDE models, hypothesis probes and the builtin model registry.

A model bundles vectorized coefficient maps for

    dX_t = b(X_t, u_t) dt + sigma(X_t, u_t) dW_t,
    J(u) = E int_0^inf e^{-rt} f(X_t, u_t) dt,

together with their first and second state derivatives, the polynomial
growth exponents ``m`` and ``l`` and a finite control set.

Array conventions (M is the batch size, n the state, d the noise and
k the control dimension):

    drift           (M, n)          diffusion       (M, n, d)
    cost            (M,)
    drift_jac       (M, n, n)       [i, l]    = d b_i / d x_l
    diffusion_jac   (M, d, n, n)    [j, i, l] = d sigma_ij / d x_l
    cost_grad       (M, n)
    drift_hess      (M, n, n, n)    [i, l, m]
    diffusion_hess  (M, d, n, n, n) [j, i, l, m]
    cost_hess       (M, n, n)

Missing derivative maps fall back to central finite differences.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidParams, NonFiniteCoefficient, UnknownModel

ArrayMap = Callable[[np.ndarray, np.ndarray], np.ndarray]

DISCOUNT_FLOOR = 0.05
DISCOUNT_MARGIN = 1.1


# ---------------------------------------------------------------------------
# control sets and sampling boxes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlSet:
    """Finite set of control points, shape (K, k)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.ndim != 2:
            raise InvalidParams("control points must be a (K, k) array")
        object.__setattr__(self, "points", pts)

    @classmethod
    def interval(cls, low: float, high: float, num: int) -> "ControlSet":
        """Uniform grid of ``num`` points on [low, high] for a scalar control."""
        if num < 1:
            raise InvalidParams("control grid needs at least one point")
        if high < low:
            raise InvalidParams("control interval has high < low")
        return cls(np.linspace(low, high, num).reshape(-1, 1))

    @classmethod
    def finite(cls, values: Sequence) -> "ControlSet":
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        return cls(arr)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def contains(self, v, atol: float = 1e-12) -> bool:
        v = np.asarray(v, dtype=float).reshape(1, -1)
        return bool(np.any(np.all(np.abs(self.points - v) <= atol, axis=1)))


@dataclass(frozen=True)
class Box:
    """Axis-aligned sampling box for the state."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=float))
        high = np.atleast_1d(np.asarray(self.high, dtype=float))
        if low.shape != high.shape or np.any(high <= low):
            raise InvalidParams("box needs low < high componentwise")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.size

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random((count, self.dim))

    def grid(self, per_axis: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(self.low, self.high)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _fd_last_axis(fun: ArrayMap, x: np.ndarray, u: np.ndarray, rel_step: float = 1e-5):
    """Central differences of ``fun`` in x, derivative index appended last."""
    cols = []
    for l in range(x.shape[1]):
        step = rel_step * (1.0 + np.abs(x[:, l]))
        e = np.zeros_like(x)
        e[:, l] = step
        diff = fun(x + e, u) - fun(x - e, u)
        shape = (-1,) + (1,) * (diff.ndim - 1)
        cols.append(diff / (2.0 * step.reshape(shape)))
    return np.stack(cols, axis=-1)


# ---------------------------------------------------------------------------
# the model contract
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlModel:
    """Controlled diffusion with running cost and growth data.

    Coefficient maps are pure functions of batched ``(x, u)``; see the
    module docstring for shapes. ``x0`` is the default initial state used
    by the simulators.
    """

    name: str
    state_dim: int
    noise_dim: int
    control_dim: int
    drift: ArrayMap
    diffusion: ArrayMap
    cost: ArrayMap
    growth_m: int
    growth_l: int
    control_set: ControlSet
    box: Box
    x0: np.ndarray
    drift_jac: Optional[ArrayMap] = None
    diffusion_jac: Optional[ArrayMap] = None
    cost_grad: Optional[ArrayMap] = None
    drift_hess: Optional[ArrayMap] = None
    diffusion_hess: Optional[ArrayMap] = None
    cost_hess: Optional[ArrayMap] = None
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.noise_dim < 1 or self.control_dim < 1:
            raise InvalidParams("dimensions must be positive")
        if self.growth_m < 0 or self.growth_l < 0:
            raise InvalidParams("growth exponents must be nonnegative")
        if self.control_set.dim != self.control_dim:
            raise InvalidParams("control set dimension does not match control_dim")
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.state_dim,):
            raise InvalidParams("x0 must have shape (state_dim,)")
        object.__setattr__(self, "x0", x0)

    # batched evaluation ---------------------------------------------------

    def _xu(self, x, u):
        x = np.asarray(x, dtype=float).reshape(-1, self.state_dim)
        u = np.asarray(u, dtype=float).reshape(-1, self.control_dim)
        if u.shape[0] == 1 and x.shape[0] > 1:
            u = np.broadcast_to(u, (x.shape[0], self.control_dim))
        return x, u

    def b(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        return self.drift(x, u)

    def sigma(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        return self.diffusion(x, u)

    def f(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        return self.cost(x, u)

    def b_x(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        if self.drift_jac is not None:
            return self.drift_jac(x, u)
        return _fd_last_axis(self.drift, x, u)

    def sigma_x(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        if self.diffusion_jac is not None:
            return self.diffusion_jac(x, u)
        return np.moveaxis(_fd_last_axis(self.diffusion, x, u), 2, 1)

    def f_x(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        if self.cost_grad is not None:
            return self.cost_grad(x, u)
        return _fd_last_axis(self.cost, x, u)

    def b_xx(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        if self.drift_hess is not None:
            return self.drift_hess(x, u)
        return _fd_last_axis(self.b_x, x, u)

    def sigma_xx(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        if self.diffusion_hess is not None:
            return self.diffusion_hess(x, u)
        return _fd_last_axis(self.sigma_x, x, u)

    def f_xx(self, x, u) -> np.ndarray:
        x, u = self._xu(x, u)
        if self.cost_hess is not None:
            return self.cost_hess(x, u)
        return _fd_last_axis(self.f_x, x, u)

    def with_x0(self, x0) -> "ControlModel":
        return replace(self, x0=np.atleast_1d(np.asarray(x0, dtype=float)))


def finite_difference_model(model: ControlModel) -> ControlModel:
    """Copy of ``model`` with every derivative replaced by finite differences."""
    return replace(
        model,
        drift_jac=None,
        diffusion_jac=None,
        cost_grad=None,
        drift_hess=None,
        diffusion_hess=None,
        cost_hess=None,
    )


def scale_cost(model: ControlModel, factor: float) -> ControlModel:
    """Model with running cost ``factor * f``; derivatives scale alike."""
    cost, grad, hess = model.cost, model.f_x, model.f_xx
    return replace(
        model,
        cost=lambda x, u: factor * cost(x, u),
        cost_grad=lambda x, u: factor * grad(x, u),
        cost_hess=lambda x, u: factor * hess(x, u),
        params={**model.params, "cost_factor": factor},
    )


def add_quadratic_cost(model: ControlModel, weight: float) -> ControlModel:
    """Model with running cost ``f + weight * |x|^2``."""
    cost, grad, hess = model.cost, model.f_x, model.f_xx
    eye = np.eye(model.state_dim)
    return replace(
        model,
        cost=lambda x, u: cost(x, u) + weight * np.sum(x * x, axis=1),
        cost_grad=lambda x, u: grad(x, u) + 2.0 * weight * x,
        cost_hess=lambda x, u: hess(x, u) + 2.0 * weight * eye,
        params={**model.params, "cost_bump": weight},
    )


# ---------------------------------------------------------------------------
# monotonicity probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotonicityReport:
    """Empirical joint-monotonicity constant c_p on a box.

    ``worst_pair`` is the (x, y, u) triple that attains ``c_p_estimate``;
    when the maximum comes from the single-point derivative form, x == y.
    """

    model_name: str
    p: float
    c_p_estimate: float
    sample_count: int
    worst_pair: tuple
    box: Box
    pair_max: float
    derivative_max: float
    growth_constant: float

    def csv_row(self) -> dict:
        def vec(a):
            return ";".join(format(float(v), ".17g") for v in np.ravel(a))

        x, y, u = self.worst_pair
        return {
            "name": self.model_name,
            "p": format(self.p, ".17g"),
            "c_p": format(self.c_p_estimate, ".17g"),
            "samples": str(self.sample_count),
            "worst_x": vec(x),
            "worst_y": vec(y),
            "worst_u": vec(u),
        }


MONOTONICITY_FIELDS = ["name", "p", "c_p", "samples", "worst_x", "worst_y", "worst_u"]


def monotonicity_csv(reports: Sequence[MonotonicityReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MONOTONICITY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        writer.writerow(rep.csv_row())
    return buf.getvalue()


def _check_finite(name: str, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteCoefficient(f"{name}: non-finite coefficient inside the probe box")


def pair_quotient(model: ControlModel, p: float, x, y, u) -> np.ndarray:
    """[<b(x,u)-b(y,u), x-y> + p ||sigma(x,u)-sigma(y,u)||^2] / |x-y|^2."""
    db = model.b(x, u) - model.b(y, u)
    ds = model.sigma(x, u) - model.sigma(y, u)
    _check_finite(model.name, db, ds)
    dx = np.asarray(x) - np.asarray(y)
    num = np.sum(db * dx, axis=1) + p * np.sum(ds * ds, axis=(1, 2))
    return num / np.sum(dx * dx, axis=1)


def derivative_form(model: ControlModel, p: float, x, u) -> np.ndarray:
    """Largest eigenvalue of sym(D_x b) + p sum_j (D_x sigma^j)^T D_x sigma^j."""
    jb = model.b_x(x, u)
    js = model.sigma_x(x, u)
    _check_finite(model.name, jb, js)
    mat = 0.5 * (jb + np.swapaxes(jb, 1, 2)) + p * np.einsum("mjil,mjik->mlk", js, js)
    if mat.shape[1] == 1:
        return mat[:, 0, 0]
    return np.linalg.eigvalsh(mat)[:, -1]


def probe_joint_monotonicity(
    model: ControlModel,
    p: float,
    box: Optional[Box] = None,
    seed: int = 0,
    samples: int = 20000,
    grid_points: int = 6001,
) -> MonotonicityReport:
    """Estimate c_p of the joint monotonicity condition on a box.

    Combines three searches: random pairs (x, y) in the box, near-diagonal
    pairs, and the derivative form at single points (random plus a dense
    grid in dimension one and two). Every search runs over all points of
    the control set. Deterministic given ``seed``.
    """
    if p <= 0:
        raise InvalidParams("p must be positive")
    box = box or model.box
    if box.dim != model.state_dim:
        raise InvalidParams("box dimension does not match the model state")
    rng = np.random.default_rng(seed)
    ctrl = model.control_set.points
    n = model.state_dim

    # random and near-diagonal pairs
    xs = box.sample(rng, samples)
    ys = box.sample(rng, samples)
    direction = rng.standard_normal((samples, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    near = np.clip(xs + 1e-3 * (box.high - box.low) * direction, box.low, box.high)
    cand_x = np.concatenate([xs, xs])
    cand_y = np.concatenate([ys, near])
    keep = np.sum((cand_x - cand_y) ** 2, axis=1) > 1e-20
    cand_x, cand_y = cand_x[keep], cand_y[keep]
    u_idx = rng.integers(ctrl.shape[0], size=cand_x.shape[0])
    quot = pair_quotient(model, p, cand_x, cand_y, ctrl[u_idx])
    i_pair = int(np.argmax(quot))
    pair_max = float(quot[i_pair])

    # derivative form on grid and random points, every control point
    if n == 1:
        pts = box.grid(grid_points)
    elif n == 2:
        pts = box.grid(int(np.sqrt(grid_points)) + 1)
    else:
        pts = np.empty((0, n))
    pts = np.concatenate([pts, box.sample(rng, samples)])
    best_val, best_x, best_u = -np.inf, None, None
    for uk in ctrl:
        vals = derivative_form(model, p, pts, uk.reshape(1, -1))
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_x, best_u = float(vals[j]), pts[j], uk

    # growth constant of the drift and diffusion on the same points
    u_rand = ctrl[rng.integers(ctrl.shape[0], size=pts.shape[0])]
    norm_x = np.linalg.norm(pts, axis=1)
    gb = np.linalg.norm(model.b(pts, u_rand), axis=1) / (1 + norm_x ** (2 * model.growth_m + 1))
    gs = np.linalg.norm(model.sigma(pts, u_rand), axis=(1, 2)) / (1 + norm_x**model.growth_m)
    _check_finite(model.name, gb, gs)
    growth = float(max(gb.max(), gs.max()))

    count = cand_x.shape[0] + pts.shape[0] * ctrl.shape[0]
    if best_val >= pair_max:
        worst = (best_x.copy(), best_x.copy(), best_u.copy())
        c_p = best_val
    else:
        worst = (cand_x[i_pair].copy(), cand_y[i_pair].copy(), ctrl[u_idx[i_pair]].copy())
        c_p = pair_max
    return MonotonicityReport(
        model_name=model.name,
        p=float(p),
        c_p_estimate=float(c_p),
        sample_count=int(count),
        worst_pair=worst,
        box=box,
        pair_max=pair_max,
        derivative_max=best_val,
        growth_constant=growth,
    )


# ---------------------------------------------------------------------------
# discount recommendation
# ---------------------------------------------------------------------------


def discount_indices(growth_m: int, growth_l: int) -> list:
    """Positive c_p indices entering the discount bound, in listing order."""
    m, l = growth_m, growth_l
    q = 2 * m + 1
    raw = [0.5, 3, 5, 7, l - 1, 3 * l - 1, 2 * m - 1, 3 * m - 1, 4 * m - 1, 2 * q - 1, 3 * q - 1, 4 * q - 1]
    out = []
    for p in raw:
        if p > 0 and p not in out:
            out.append(float(p))
    return out


@dataclass(frozen=True)
class DiscountRecommendation:
    r: float
    constants: dict
    c_max: float
    binding_index: Optional[float]
    all_negative: bool
    floor_used: bool


def discount_details(
    model: ControlModel,
    reports: Sequence[MonotonicityReport] = (),
    box: Optional[Box] = None,
    seed: int = 0,
    samples: int = 20000,
) -> DiscountRecommendation:
    """Evaluate the discount bound, probing missing indices on demand."""
    known = {float(rep.p): rep.c_p_estimate for rep in reports}
    constants = {}
    for p in discount_indices(model.growth_m, model.growth_l):
        if p not in known:
            known[p] = probe_joint_monotonicity(model, p, box=box, seed=seed, samples=samples).c_p_estimate
        constants[p] = known[p]
    binding = max(constants, key=lambda k: constants[k])
    c_max = max(0.0, constants[binding])
    all_negative = all(c < 0 for c in constants.values())
    r = DISCOUNT_MARGIN * 64.0 * (2 * model.growth_m + 1) * c_max
    floor_used = r < DISCOUNT_FLOOR
    return DiscountRecommendation(
        r=max(r, DISCOUNT_FLOOR),
        constants=constants,
        c_max=c_max,
        binding_index=None if c_max == 0.0 else binding,
        all_negative=all_negative,
        floor_used=floor_used,
    )


def recommend_discount(
    model: ControlModel,
    reports: Sequence[MonotonicityReport] = (),
    box: Optional[Box] = None,
    seed: int = 0,
) -> float:
    """Discount factor above 64(2m+1) max{0, c_p} with a 10% margin."""
    return discount_details(model, reports, box=box, seed=seed).r


# ---------------------------------------------------------------------------
# builtin models
# ---------------------------------------------------------------------------


def _col(x):
    return x[:, 0]


def _pack(values):
    """Stack scalar-per-path values into shape (M, 1)."""
    return np.asarray(values).reshape(-1, 1)


def _quadratic_cost(wx: float, wu: float, n: int):
    eye = np.eye(n)

    def cost(x, u):
        return wx * np.sum(x * x, axis=1) + wu * np.sum(u * u, axis=1)

    def grad(x, u):
        return 2.0 * wx * x

    def hess(x, u):
        return np.broadcast_to(2.0 * wx * eye, (x.shape[0], n, n)).copy()

    return cost, grad, hess


def _get(params: Mapping, key: str, default):
    value = params.get(key, default)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise InvalidParams(f"parameter '{key}' must be a number, got {value!r}") from None


def _control_set(params: Mapping, low: float, high: float, num: int) -> ControlSet:
    lo = _get(params, "control_low", low)
    hi = _get(params, "control_high", high)
    k = int(_get(params, "control_points", num))
    if k < 1 or hi < lo:
        raise InvalidParams("control grid needs control_low <= control_high and at least one point")
    return ControlSet.interval(lo, hi, k)


def _scalar_model(name, params, drift, dj, dh, diff, sj, sh, m, box, x0, controls):
    wx = _get(params, "state_weight", 1.0)
    wu = _get(params, "control_weight", 1.0)
    cost, grad, hess = _quadratic_cost(wx, wu, 1)
    return ControlModel(
        name=name,
        state_dim=1,
        noise_dim=1,
        control_dim=1,
        drift=lambda x, u: _pack(drift(_col(x), _col(u))),
        diffusion=lambda x, u: diff(_col(x), _col(u)).reshape(-1, 1, 1),
        cost=cost,
        drift_jac=lambda x, u: dj(_col(x), _col(u)).reshape(-1, 1, 1),
        diffusion_jac=lambda x, u: sj(_col(x), _col(u)).reshape(-1, 1, 1, 1),
        cost_grad=grad,
        drift_hess=lambda x, u: dh(_col(x), _col(u)).reshape(-1, 1, 1, 1),
        diffusion_hess=lambda x, u: sh(_col(x), _col(u)).reshape(-1, 1, 1, 1, 1),
        cost_hess=hess,
        growth_m=m,
        growth_l=2,
        control_set=controls,
        box=box,
        x0=np.array([_get(params, "x0", x0)]),
        params=dict(params),
    )


def _full(value, like):
    return np.full(like.shape, value, dtype=float)


def _polynomial_x5(params):
    g = _get(params, "drift_gain", 1.0)
    s1 = _get(params, "sigma_u", 0.0)
    return _scalar_model(
        "polynomial_x5",
        params,
        drift=lambda x, u: x - x**5 + g * u,
        dj=lambda x, u: 1.0 - 5.0 * x**4,
        dh=lambda x, u: -20.0 * x**3,
        diff=lambda x, u: x**2 + s1 * u,
        sj=lambda x, u: 2.0 * x,
        sh=lambda x, u: _full(2.0, x),
        m=2,
        box=Box([-3.0], [3.0]),
        x0=1.0,
        controls=_control_set(params, -1.0, 1.0, 21),
    )


def _logistic(params):
    alpha = _get(params, "alpha", 1.0)
    beta = _get(params, "beta", 1.0)
    s0 = _get(params, "sigma0", 0.2)
    s1 = _get(params, "sigma_u", 0.0)
    g = _get(params, "drift_gain", 1.0)
    if alpha <= 0 or beta <= 0:
        raise InvalidParams("logistic model needs alpha > 0 and beta > 0")
    if s0 < 0:
        raise InvalidParams("logistic model needs sigma0 >= 0")
    return _scalar_model(
        "logistic",
        params,
        drift=lambda x, u: alpha * x * (1.0 - beta * x) + g * u,
        dj=lambda x, u: alpha - 2.0 * alpha * beta * x,
        dh=lambda x, u: _full(-2.0 * alpha * beta, x),
        diff=lambda x, u: (s0 + s1 * u) * x,
        sj=lambda x, u: s0 + s1 * u,
        sh=lambda x, u: np.zeros_like(x),
        m=1,
        box=Box([1e-3], [3.0 / beta]),
        x0=0.5 / beta,
        controls=_control_set(params, -1.0, 1.0, 21),
    )


def _gompertz(params):
    alpha = _get(params, "alpha", 1.0)
    beta = _get(params, "beta", 1.0)
    s0 = _get(params, "sigma0", 0.2)
    if alpha <= 0 or beta <= 0:
        raise InvalidParams("gompertz model needs alpha > 0 and beta > 0")
    if s0 < 0:
        raise InvalidParams("gompertz model needs sigma0 >= 0")
    return _scalar_model(
        "gompertz_uncontrolled_noise",
        params,
        drift=lambda x, u: alpha * x * (1.0 - beta * np.log(x)) + u,
        dj=lambda x, u: alpha * (1.0 - beta * np.log(x)) - alpha * beta,
        dh=lambda x, u: -alpha * beta / x,
        diff=lambda x, u: s0 * x,
        sj=lambda x, u: _full(s0, x),
        sh=lambda x, u: np.zeros_like(x),
        m=1,
        box=Box([0.05], [5.0]),
        x0=1.0,
        controls=_control_set(params, -0.5, 0.5, 11),
    )


def _double_well(params):
    s0 = _get(params, "sigma0", 0.3)
    if s0 < 0:
        raise InvalidParams("double_well needs sigma0 >= 0")
    return _scalar_model(
        "double_well",
        params,
        drift=lambda x, u: -4.0 * x * (x * x - 1.0) + u,
        dj=lambda x, u: 4.0 - 12.0 * x * x,
        dh=lambda x, u: -24.0 * x,
        diff=lambda x, u: _full(s0, x),
        sj=lambda x, u: np.zeros_like(x),
        sh=lambda x, u: np.zeros_like(x),
        m=1,
        box=Box([-3.0], [3.0]),
        x0=1.0,
        controls=_control_set(params, -1.0, 1.0, 21),
    )


def _lq_scalar(params):
    a = _get(params, "a", -1.0)
    s0 = _get(params, "sigma0", 0.5)
    s1 = _get(params, "sigma_u", 0.0)
    return _scalar_model(
        "lq_scalar",
        params,
        drift=lambda x, u: a * x + u,
        dj=lambda x, u: _full(a, x),
        dh=lambda x, u: np.zeros_like(x),
        diff=lambda x, u: s0 + s1 * u,
        sj=lambda x, u: np.zeros_like(x),
        sh=lambda x, u: np.zeros_like(x),
        m=0,
        box=Box([-3.0], [3.0]),
        x0=1.0,
        controls=_control_set(params, -2.0, 2.0, 41),
    )


def _gradient_flow_2d(params):
    s = _get(params, "sigma0", 0.3)
    if s < 0:
        raise InvalidParams("gradient_flow_2d needs sigma0 >= 0")
    wx = _get(params, "state_weight", 1.0)
    wu = _get(params, "control_weight", 1.0)
    cost, grad, hess = _quadratic_cost(wx, wu, 2)

    def drift(x, u):
        X, Y = x[:, 0], x[:, 1]
        g = 1.0 + X * X
        return np.stack([-X + X * Y * Y / g**2 + u[:, 0], -Y / g], axis=1)

    def drift_jac(x, u):
        X, Y = x[:, 0], x[:, 1]
        g = 1.0 + X * X
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = -1.0 + Y * Y / g**2 - 4.0 * X * X * Y * Y / g**3
        out[:, 0, 1] = 2.0 * X * Y / g**2
        out[:, 1, 0] = 2.0 * X * Y / g**2
        out[:, 1, 1] = -1.0 / g
        return out

    def drift_hess(x, u):
        X, Y = x[:, 0], x[:, 1]
        g = 1.0 + X * X
        # b1 = -X + Y^2 h(X) with h = X g^-2 ; b2 = -Y k(X) with k = g^-1
        h = X / g**2
        h1 = 1.0 / g**2 - 4.0 * X * X / g**3
        h2 = -12.0 * X / g**3 + 24.0 * X**3 / g**4
        k1 = -2.0 * X / g**2
        k2 = -2.0 / g**2 + 8.0 * X * X / g**3
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 0, 0, 0] = Y * Y * h2
        out[:, 0, 0, 1] = out[:, 0, 1, 0] = 2.0 * Y * h1
        out[:, 0, 1, 1] = 2.0 * h
        out[:, 1, 0, 0] = -Y * k2
        out[:, 1, 0, 1] = out[:, 1, 1, 0] = -k1
        return out

    return ControlModel(
        name="gradient_flow_2d",
        state_dim=2,
        noise_dim=2,
        control_dim=1,
        drift=drift,
        diffusion=lambda x, u: np.broadcast_to(s * np.eye(2), (x.shape[0], 2, 2)).copy(),
        cost=cost,
        drift_jac=drift_jac,
        diffusion_jac=lambda x, u: np.zeros((x.shape[0], 2, 2, 2)),
        cost_grad=grad,
        drift_hess=drift_hess,
        diffusion_hess=lambda x, u: np.zeros((x.shape[0], 2, 2, 2, 2)),
        cost_hess=hess,
        growth_m=0,
        growth_l=2,
        control_set=_control_set(params, -1.0, 1.0, 21),
        box=Box([-3.0, -3.0], [3.0, 3.0]),
        x0=np.array([_get(params, "x0", 1.0), _get(params, "y0", 1.0)]),
        params=dict(params),
    )


BUILTIN_MODELS = {
    "polynomial_x5": _polynomial_x5,
    "logistic": _logistic,
    "gompertz_uncontrolled_noise": _gompertz,
    "double_well": _double_well,
    "gradient_flow_2d": _gradient_flow_2d,
    "lq_scalar": _lq_scalar,
}


def builtin_model(name: str, params: Optional[Mapping] = None) -> ControlModel:
    """Construct a registered model.

    Parameters
    ----------
    name : str
        One of ``BUILTIN_MODELS``.
    params : mapping, optional
        Family parameters. Every family accepts ``x0``, ``state_weight``,
        ``control_weight`` and the control grid keys ``control_low``,
        ``control_high``, ``control_points``.

    Raises
    ------
    UnknownModel
        If ``name`` is not registered.
    InvalidParams
        If a parameter is out of range or not numeric.
    """
    if name not in BUILTIN_MODELS:
        raise UnknownModel(f"unknown model '{name}'; known: {sorted(BUILTIN_MODELS)}")
    return BUILTIN_MODELS[name](dict(params or {}))


def riccati_gain(a: float, r: float) -> float:
    """Positive root of P^2 + (r - 2a) P - 1 = 0 for the scalar LQ problem."""
    return 0.5 * ((2.0 * a - r) + np.sqrt((2.0 * a - r) ** 2 + 4.0))

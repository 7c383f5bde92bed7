import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import P_STAR
from dissipative_smp.errors import InvalidParams, UnknownModel
from dissipative_smp.models import (
    BUILTIN_MODELS,
    ControlSet,
    builtin_model,
    discount_details,
    finite_difference_model,
    monotonicity_csv,
    probe_joint_monotonicity,
    recommend_discount,
    riccati_gain,
)

ALL = sorted(BUILTIN_MODELS)


def _inside(model, rng, M=64):
    x = model.box.sample(rng, M)
    u = model.control_set.points[rng.integers(0, model.control_set.size, M)]
    return x, u


class TestBuiltins:
    @pytest.mark.parametrize("name", ALL)
    def test_shapes(self, name):
        m = builtin_model(name)
        x, u = _inside(m, np.random.default_rng(0), 5)
        n, d = m.state_dim, m.noise_dim
        assert m.b(x, u).shape == (5, n)
        assert m.sigma(x, u).shape == (5, n, d)
        assert m.f(x, u).shape == (5,)
        assert m.b_x(x, u).shape == (5, n, n)
        assert m.sigma_x(x, u).shape == (5, n, d, n)
        assert m.b_xx(x, u).shape == (5, n, n, n)
        assert m.sigma_xx(x, u).shape == (5, n, d, n, n)
        assert m.f_xx(x, u).shape == (5, n, n)

    @pytest.mark.parametrize("name", ALL)
    def test_analytic_derivatives_match_finite_differences(self, name):
        m = builtin_model(name)
        fd = finite_difference_model(m)
        x, u = _inside(m, np.random.default_rng(1))
        for attr in ("b_x", "sigma_x", "f_x", "b_xx", "sigma_xx", "f_xx"):
            a, b = getattr(m, attr)(x, u), getattr(fd, attr)(x, u)
            scale = 1.0 + np.max(np.abs(a))
            assert np.max(np.abs(a - b)) <= 1e-4 * scale, attr

    def test_unknown_model(self):
        with pytest.raises(UnknownModel):
            builtin_model("no_such_model")

    @pytest.mark.parametrize("name,params", [
        ("logistic", {"alpha": -1.0}),
        ("logistic", {"sigma0": -0.1}),
        ("gompertz_uncontrolled_noise", {"beta": 0.0}),
        ("double_well", {"sigma0": -1.0}),
        ("lq_scalar", {"a": "fast"}),
        ("lq_scalar", {"control_points": 0}),
    ])
    def test_invalid_params(self, name, params):
        with pytest.raises(InvalidParams):
            builtin_model(name, params)

    def test_invalid_params_is_value_error(self):
        with pytest.raises(ValueError):
            builtin_model("logistic", {"beta": -2.0})

    def test_lq_values(self):
        m = builtin_model("lq_scalar", {"a": -1.0, "sigma0": 0.5, "sigma_u": 0.25})
        x, u = np.array([[2.0]]), np.array([[1.0]])
        assert m.b(x, u)[0, 0] == -1.0
        assert m.sigma(x, u)[0, 0, 0] == 0.75
        assert m.f(x, u)[0] == 5.0

    def test_logistic_drift_gain(self):
        m = builtin_model("logistic", {"alpha": 0.2, "beta": 1.0, "drift_gain": 0.1})
        x, u = np.array([[0.5]]), np.array([[1.0]])
        assert m.b(x, u)[0, 0] == pytest.approx(0.2 * 0.5 * 0.5 + 0.1)


class TestControlSet:
    def test_interval(self):
        cs = ControlSet.interval(-2.0, 2.0, 41)
        assert cs.size == 41 and cs.dim == 1
        assert cs.contains([0.1]) and not cs.contains([0.15])

    def test_finite(self):
        cs = ControlSet.finite([[0.0], [1.0]])
        assert cs.size == 2


class TestRiccati:
    def test_frozen_root(self):
        assert riccati_gain(-1.0, 0.5) == pytest.approx(P_STAR, abs=1e-15)
        assert riccati_gain(-1.0, 0.5) == pytest.approx(0.35078105935821213, abs=1e-15)

    @given(st.floats(-3.0, 1.0), st.floats(0.05, 3.0))
    def test_root_solves_equation(self, a, r):
        P = riccati_gain(a, r)
        assert P > 0
        assert P * P + (r - 2 * a) * P - 1.0 == pytest.approx(0.0, abs=1e-9)


class TestMonotonicity:
    def test_lq_constant_is_drift_slope(self):
        # For b = a x + u with state-independent noise the pair quotient is exactly a.
        rep = probe_joint_monotonicity(builtin_model("lq_scalar"), 1.0, samples=2000)
        assert rep.c_p_estimate == pytest.approx(-1.0, abs=1e-9)

    def test_polynomial_half(self):
        # At p = 1/2 the derivative form is 1 - 5x^4 + 2x^2, largest at x^2 = 1/5.
        rep = probe_joint_monotonicity(builtin_model("polynomial_x5"), 0.5, samples=4000)
        assert rep.c_p_estimate == pytest.approx(1.2, abs=1e-6)

    def test_deterministic(self):
        m = builtin_model("double_well")
        a = probe_joint_monotonicity(m, 1.0, seed=3, samples=1000)
        b = probe_joint_monotonicity(m, 1.0, seed=3, samples=1000)
        assert a.c_p_estimate == b.c_p_estimate

    def test_csv_row(self):
        rep = probe_joint_monotonicity(builtin_model("polynomial_x5"), 0.5, samples=500)
        text = monotonicity_csv([rep])
        header, row = text.strip().split("\n")
        assert header == "name,p,c_p,samples,worst_x,worst_y,worst_u"
        assert row.startswith("polynomial_x5,0.5,")


class TestDiscount:
    def test_floor_for_dissipative_lq(self):
        rec = discount_details(builtin_model("lq_scalar"), samples=1000)
        assert rec.all_negative and rec.floor_used
        assert rec.r == pytest.approx(0.05)

    def test_polynomial_formula(self):
        m = builtin_model("polynomial_x5")
        rec = discount_details(m, samples=2000)
        assert rec.r == pytest.approx(1.1 * 64 * 5 * rec.c_max)
        assert recommend_discount(m) > 0

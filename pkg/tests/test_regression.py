import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dissipative_smp.errors import InvalidParams, NonFiniteRegression, SingularDesignMatrix
from dissipative_smp.regression import Projector, RegressionBasis


class TestBasis:
    def test_sizes(self):
        assert RegressionBasis("polynomial_total_degree", 3).size(1) == 4
        assert RegressionBasis("polynomial_total_degree", 3).size(2) == 10
        assert RegressionBasis("tensor_polynomial", 2).size(2) == 9

    def test_constant_first(self):
        assert RegressionBasis().exponents(2)[0] == (0, 0)

    @pytest.mark.parametrize("family,degree", [("chebyshev", 3), ("tensor_polynomial", 0)])
    def test_rejects(self, family, degree):
        with pytest.raises(InvalidParams):
            RegressionBasis(family, degree)

    def test_constant_component_drops_monomials(self):
        x = np.column_stack([np.linspace(-1, 1, 50), np.full(50, 3.0)])
        b = RegressionBasis("polynomial_total_degree", 2)
        mean, std = b.standardize(x)
        assert std[1] == 0.0
        assert b.design(x, mean, std).shape == (50, 3)


class TestProjector:
    @given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.integers(0, 10**6))
    def test_recovers_cubic_exactly(self, coefs, seed):
        x = np.random.default_rng(seed).normal(size=(200, 1))
        y = coefs[0] + coefs[1] * x[:, 0] + coefs[2] * x[:, 0] ** 2 + coefs[3] * x[:, 0] ** 3
        proj = Projector(RegressionBasis(degree=3), x)
        fit = proj.fit(y)
        assert np.allclose(proj.fitted(fit)[:, 0], y, atol=1e-7 * (1 + np.abs(y).max()))
        assert np.allclose(fit.predict(x)[:, 0], y, atol=1e-7 * (1 + np.abs(y).max()))

    def test_two_dimensional_quadratic(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(300, 2))
        y = np.column_stack([x[:, 0] * x[:, 1], 1 + x[:, 1] ** 2])
        fit = Projector(RegressionBasis(degree=2), x).fit(y)
        assert np.allclose(fit.predict(x), y, atol=1e-9)
        assert np.allclose(fit.r2, 1.0)

    def test_projection_residual_orthogonal(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(500, 1))
        y = np.sin(3 * x[:, 0]) + rng.normal(size=500)
        proj = Projector(RegressionBasis(degree=3), x)
        resid = y - proj.fitted(proj.fit(y))[:, 0]
        assert np.max(np.abs(proj.phi.T @ resid)) <= 1e-8 * 500

    def test_constant_target_has_unit_r2(self):
        x = np.random.default_rng(0).normal(size=(20, 1))
        assert Projector(RegressionBasis(), x).fit(np.full(20, 2.0)).r2[0] == 1.0

    def test_constant_state_fits_mean(self):
        x = np.ones((10, 1))
        y = np.arange(10.0)
        fit = Projector(RegressionBasis(), x).fit(y)
        assert fit.predict(x)[0, 0] == pytest.approx(4.5)

    def test_too_few_paths(self):
        with pytest.raises(SingularDesignMatrix):
            Projector(RegressionBasis(degree=3), np.random.default_rng(0).normal(size=(3, 1)))

    def test_ill_conditioned(self):
        x = np.concatenate([np.zeros(999), [1.0]]).reshape(-1, 1)
        with pytest.raises(SingularDesignMatrix):
            Projector(RegressionBasis(degree=3), x)

    def test_non_finite(self):
        x = np.random.default_rng(0).normal(size=(20, 1))
        x[3] = np.inf
        with pytest.raises((NonFiniteRegression, SingularDesignMatrix)):
            Projector(RegressionBasis(), x)

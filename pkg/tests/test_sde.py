import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import P_STAR
from dissipative_smp.controls import ConstantControl, LinearFeedback
from dissipative_smp.errors import InvalidParams
from dissipative_smp.models import builtin_model
from dissipative_smp.sde import (
    NoiseSource,
    TimeGrid,
    estimate_cost,
    fmt,
    implicit_drift_solve,
    moment_envelope,
    simulate_linearized_flow,
    simulate_state,
    split_step,
    weighted_moment_profile,
)


class TestTimeGrid:
    def test_for_tail(self):
        g = TimeGrid.for_tail(0.5, 0.01, 1e-3)
        assert math.exp(-0.5 * g.horizon_T) <= 1e-3
        assert g.horizon_T - 0.01 < math.log(1e3) / 0.5

    @pytest.mark.parametrize("kw", [
        dict(horizon_T=-1.0, step_h=0.1, discount_r=1.0),
        dict(horizon_T=1.0, step_h=0.0, discount_r=1.0),
        dict(horizon_T=1.0, step_h=2.0, discount_r=1.0, tail_tolerance=1.0),
        dict(horizon_T=1.0, step_h=0.1, discount_r=0.0),
        dict(horizon_T=1.0, step_h=0.1, discount_r=1.0),
        dict(horizon_T=1.0, step_h=0.1, discount_r=1.0, tail_tolerance=1.0, noise_substeps=0),
    ])
    def test_rejects(self, kw):
        with pytest.raises(InvalidParams):
            TimeGrid(**kw)

    def test_index(self):
        g = TimeGrid(2.0, 0.01, 1.0, tail_tolerance=1.0)
        assert g.steps == 200
        assert g.index(0.5) == 50
        with pytest.raises(InvalidParams):
            g.index(3.0)


class TestNoise:
    def test_regenerable_in_any_order(self):
        n = NoiseSource(5, 2, 0.01)
        a = n.increments(7, 10)
        n.increments(3, 10)
        assert np.array_equal(a, n.increments(7, 10))

    def test_streams_differ(self):
        assert not np.array_equal(NoiseSource(5, 1, 0.01, stream=0).increments(0, 4),
                                  NoiseSource(5, 1, 0.01, stream=1).increments(0, 4))

    def test_substeps_share_the_path(self):
        fine = NoiseSource(1, 1, 0.01, substeps=1)
        coarse = NoiseSource(1, 1, 0.02, substeps=2)
        assert np.allclose(coarse.increments(3, 6), fine.increments(6, 6) + fine.increments(7, 6), atol=1e-15)


class TestImplicitSolve:
    @given(st.floats(-3, 3), st.sampled_from([1e-3, 1e-2, 0.1]))
    def test_residual_polynomial(self, x0, h):
        m = builtin_model("polynomial_x5")
        x = np.array([[x0]])
        u = np.array([[0.5]])
        y = implicit_drift_solve(m, x, u, h)
        assert abs(y[0, 0] - h * m.b(y, u)[0, 0] - x0) <= 1e-10 * (1 + abs(x0))

    def test_two_dimensional(self):
        m = builtin_model("gradient_flow_2d")
        rng = np.random.default_rng(0)
        x = rng.uniform(-2, 2, (50, 2))
        u = np.zeros((50, 1))
        y = implicit_drift_solve(m, x, u, 0.05)
        assert np.max(np.abs(y - 0.05 * m.b(y, u) - x)) <= 1e-10

    def test_linear_drift_closed_form(self, lq_model):
        x = np.array([[1.0], [-2.0]])
        y = implicit_drift_solve(lq_model, x, np.zeros((2, 1)), 0.1)
        assert np.allclose(y, x / 1.1, atol=1e-14)


class TestSimulate:
    def test_deterministic_and_worker_invariant(self, lq_model, small_grid, optimal_feedback):
        a = simulate_state(lq_model, optimal_feedback, small_grid, 300, 9)
        b = simulate_state(lq_model, optimal_feedback, small_grid, 300, 9, workers=3)
        assert np.array_equal(a.states_array(), b.states_array())

    def test_checkpoint_replay_matches_storage(self, lq_model, small_grid, optimal_feedback):
        full = simulate_state(lq_model, optimal_feedback, small_grid, 200, 4)
        lean = simulate_state(lq_model, optimal_feedback, small_grid, 200, 4, memory_budget=1)
        assert lean.stride > 1
        assert np.array_equal(full.states_array(), lean.states_array())
        for k in (0, 17, 399, 400):
            assert np.array_equal(full.state(k), lean.state(k))
        back_full = [s.x for s in full.iter_backward()]
        back_lean = [s.x for s in lean.iter_backward()]
        assert all(np.array_equal(p, q) for p, q in zip(back_full, back_lean))

    def test_discrete_mean_and_variance(self, lq_model):
        # Drift-implicit step with feedback gain P*: X_{k+1} = X_k / (1 + h k) + sigma dW.
        h, M = 0.01, 20000
        grid = TimeGrid(1.0, h, 0.5, tail_tolerance=1.0)
        b = simulate_state(lq_model, LinearFeedback([[-P_STAR]]), grid, M, 2)
        kappa = P_STAR + 1.0
        mean, var = 1.0, 0.0
        for _ in range(grid.steps):
            mean /= 1 + h * kappa
            var = var / (1 + h * kappa) ** 2 + 0.25 * h
        x = b.state(grid.steps)[:, 0]
        assert abs(x.mean() - mean) <= 4 * x.std() / math.sqrt(M)
        assert abs(x.var() - var) <= 4 * var * math.sqrt(2.0 / M)

    def test_csv_columns(self, lq_model, small_grid, tmp_path):
        b = simulate_state(lq_model, ConstantControl([0.0]), small_grid, 5, 1)
        b.to_csv(tmp_path / "p.csv", paths=[0, 3])
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "path_id,step,t,x_1,u"
        assert len(lines) == 1 + 2 * (small_grid.steps + 1)

    def test_bad_M(self, lq_model, small_grid):
        with pytest.raises(InvalidParams):
            simulate_state(lq_model, ConstantControl([0.0]), small_grid, 0, 1)


class TestMoments:
    def test_envelope_dominates_lq(self, lq_model, small_grid):
        b = simulate_state(lq_model, ConstantControl([0.0]), small_grid, 4000, 3)
        t, mean, se = weighted_moment_profile(b, 0.5)
        bound = moment_envelope(lq_model).weighted(t, 0.5)
        assert np.all(mean <= bound + 3 * se)

    def test_envelope_polynomial_moderate_discount(self):
        m = builtin_model("polynomial_x5")
        grid = TimeGrid(3.0, 1e-3, 5.0, tail_tolerance=1.0)
        b = simulate_state(m, ConstantControl([0.0]), grid, 2000, 1)
        t, mean, se = weighted_moment_profile(b, 5.0)
        env = moment_envelope(m)
        assert env.lam < 5.0
        assert np.all(mean <= env.weighted(t, 5.0) + 3 * se)

    def test_cost_closed_form(self, lq_model):
        # u = 0, sigma = 0: X_k = (1 + h)^{-k}, cost sum_k h e^{-r t_k} X_k^2.
        m = builtin_model("lq_scalar", {"sigma0": 0.0})
        grid = TimeGrid(2.0, 0.05, 0.5, tail_tolerance=1.0)
        c = estimate_cost(m, simulate_state(m, ConstantControl([0.0]), grid, 3, 0), tail=False)
        exact = sum(0.05 * math.exp(-0.5 * 0.05 * k) * (1.05 ** -k) ** 2 for k in range(40))
        assert c.value == pytest.approx(exact, rel=1e-12)
        assert c.std_error == 0.0


class TestLinearizedFlow:
    def test_lq_flow_is_deterministic_decay(self, lq_model, small_grid):
        b = simulate_state(lq_model, ConstantControl([0.0]), small_grid, 10, 0)
        y = simulate_linearized_flow(lq_model, b, 100, [1.0])
        assert np.allclose(y[:, 0, 0], (1 - 0.01) ** np.arange(y.shape[0]), rtol=1e-12)


def test_fmt_round_trips():
    for v in (0.1, 1 / 3, -2.5e-300, 12345.678):
        assert float(fmt(v)) == v


@given(st.integers(1, 5))
def test_split_step_zero_noise_equals_implicit(seed):
    m = builtin_model("double_well", {"sigma0": 0.0})
    x = np.random.default_rng(seed).uniform(-2, 2, (7, 1))
    u = np.zeros((7, 1))
    assert np.array_equal(split_step(m, x, u, 0.01, np.ones((7, 1))), implicit_drift_solve(m, x, u, 0.01))

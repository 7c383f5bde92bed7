import math

import numpy as np
import pytest

from conftest import P_STAR
from dissipative_smp.adjoint import (
    IDENTITY_FIELDS,
    apriori_contraction_check,
    check_duality_yp,
    check_duality_zp,
    identity_report,
    solve_first_adjoint,
    truncation_cauchy,
    write_identity_csv,
)
from dissipative_smp.errors import InvalidParams
from dissipative_smp.models import scale_cost
from dissipative_smp.oracle import adjoint_slope
from dissipative_smp.sde import simulate_state
from dissipative_smp.variation import SpikeSpec, simulate_variations


@pytest.fixture(scope="module")
def lq_run(lq_model, small_grid, optimal_feedback):
    bundle = simulate_state(lq_model, optimal_feedback, small_grid, 4000, 21)
    return bundle, solve_first_adjoint(lq_model, bundle)


@pytest.fixture(scope="module")
def variant_run(lq_variant, small_grid, optimal_feedback):
    bundle = simulate_state(lq_variant, optimal_feedback, small_grid, 4000, 22)
    adjoint = solve_first_adjoint(lq_variant, bundle)
    var = simulate_variations(lq_variant, bundle, SpikeSpec(0.5, 0.2, [1.0]), adjoint=adjoint)
    return bundle, adjoint, var


class TestFirstAdjoint:
    def test_slope_near_riccati(self, lq_run):
        bundle, adj = lq_run
        # The horizon T = 4 cuts the integral, so allow a few percent.
        assert adjoint_slope(adj, bundle, 100) == pytest.approx(-2 * P_STAR, rel=0.06)

    def test_terminal_p_is_zero(self, lq_run):
        bundle, adj = lq_run
        N = bundle.end_step
        assert np.all(adj.p_at(N) == 0.0)
        assert np.all(adj.q_at(N) == 0.0)

    def test_truncation_zeroes_tail(self, lq_model, lq_run):
        bundle, _ = lq_run
        adj = solve_first_adjoint(lq_model, bundle, truncation_k=2.0)
        assert adj.truncation_step == 200
        assert np.all(adj.p_at(250) == 0.0)
        assert np.any(adj.p_at(150) != 0.0)

    def test_picard_zero_returns_predictor(self, lq_model, lq_run):
        bundle, _ = lq_run
        adj = solve_first_adjoint(lq_model, bundle, picard_sweeps=0)
        x = bundle.state(50)
        assert np.array_equal(adj.p(50, x), adj.p_plus(50, x))

    def test_rejects(self, lq_model, lq_run):
        bundle, _ = lq_run
        with pytest.raises(InvalidParams):
            solve_first_adjoint(lq_model, bundle, picard_sweeps=-1)
        with pytest.raises(InvalidParams):
            solve_first_adjoint(lq_model, bundle, truncation_k=100.0)

    def test_regression_diagnostics(self, lq_run):
        _, adj = lq_run
        # Early nodes have little state spread, so only the later fits are sharp.
        assert adj.r2_mean[100:].min() > 0.9
        assert adj.low_r2_steps().max() < 100

    def test_csv(self, lq_run, tmp_path):
        _, adj = lq_run
        adj.to_csv(tmp_path / "a.csv", paths=[0, 1])
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0] == "path_id,step,t,p_1,q_11"


class TestDuality:
    def test_yp(self, lq_variant, variant_run):
        bundle, adj, var = variant_run
        rep = check_duality_yp(lq_variant, bundle, adj, var)
        assert rep.verdict == "holds"
        assert abs(rep.lhs) > 10 * rep.std_err

    def test_zp(self, lq_variant, variant_run):
        bundle, adj, var = variant_run
        rep = check_duality_zp(lq_variant, bundle, adj, var)
        assert rep.verdict == "holds"
        assert "jump_term" in rep.extras

    def test_identity_report_uses_paired_error(self):
        lhs = np.arange(10.0)
        rep = identity_report("x", lhs, lhs + 1.0)
        assert rep.diff == -1.0 and rep.std_err == 0.0
        assert rep.verdict == "fails"
        assert identity_report("x", lhs, lhs, 0.0).verdict == "holds"

    def test_identity_csv(self, tmp_path):
        rep = identity_report("x", np.ones(4), np.ones(4))
        write_identity_csv(tmp_path / "i.csv", [rep])
        header, row = (tmp_path / "i.csv").read_text().splitlines()
        assert header == ",".join(IDENTITY_FIELDS)
        assert row == "x,1,1,0,0,holds"


class TestEstimates:
    def test_contraction(self, lq_model, lq_run):
        bundle, adj = lq_run
        other = solve_first_adjoint(scale_cost(lq_model, 2.0), bundle)
        rep = apriori_contraction_check(lq_model, bundle, adj, other, c_half=-1.0)
        assert rep.holds
        assert rep.delta == pytest.approx(1.25)
        assert rep.binding_delta > 0

    def test_contraction_needs_gap(self, lq_model, lq_run):
        bundle, adj = lq_run
        with pytest.raises(InvalidParams):
            apriori_contraction_check(lq_model, bundle, adj, adj, c_half=1.0)

    def test_truncation_cauchy(self, lq_model, lq_run):
        bundle, _ = lq_run
        rep = truncation_cauchy(lq_model, bundle, [1.0, 2.0, 3.0, 4.0])
        assert rep.decreasing
        assert rep.distances[-1] == 0.0
        assert rep.distances[0] > rep.distances[2]

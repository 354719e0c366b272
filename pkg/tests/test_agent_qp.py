"""Forward solver tests: spec'd examples frozen against independent oracles."""

import numpy as np
import pytest

from drid.agent_qp import (
    ALPHA_MIN,
    INF_BOUND,
    TOL_KKT,
    AgentModelKind,
    AgentParams,
    PriceSignal,
    agent_objective,
    build_constraints,
    complementarity_margin,
    expand_total_budget,
    kkt_residuals,
    solve_agent_qp,
    solve_agent_qp_batch,
    solve_asymmetric,
)
from drid.errors import (
    DimensionMismatch,
    GhostDemandViolation,
    InfeasibleModel,
)

from oracles import asymmetric_oracle, budget_oracle, qp_oracle


def random_box_instance(rng, T):
    lam = rng.uniform(-3, 3, size=T)
    alpha = rng.uniform(0.5, 5.0)
    p_hi = rng.uniform(0.2, 2.0)
    p_lo = -rng.uniform(0.2, 2.0)
    e_hi = rng.uniform(0.3, 2.5)
    e_lo = -rng.uniform(0.3, 2.5)
    return AgentParams.general_box(alpha, p_lo, p_hi, e_lo, e_hi), lam


class TestSolveAgentQP:
    def test_zero_price_zero_response(self):
        params = AgentParams.general_box(1.0, -1.0, 1.0, -1.0, 1.0)
        sol = solve_agent_qp(params, [0.0, 0.0])
        assert np.allclose(sol.y, 0.0, atol=1e-9)
        for d in (sol.mu_lo, sol.mu_hi, sol.nu_lo, sol.nu_hi):
            assert np.all(np.abs(d) < 1e-8)

    def test_total_budget_binding(self):
        # oracle-verified: with lam=(1,2), alpha=1, M=1 the lower budget binds
        params = AgentParams.total_budget(1.0, 1.0)
        lam = np.array([1.0, 2.0])
        sol = solve_agent_qp(params, lam)
        expected = np.array([0.0, -1.0])
        assert np.allclose(sol.y, expected, atol=1e-7)
        assert sol.nu_lo[-1] == pytest.approx(1.0, abs=1e-7)
        assert np.all(np.abs(np.concatenate([sol.mu_lo, sol.mu_hi, sol.nu_hi])) < 1e-7)
        assert np.allclose(budget_oracle(lam, 1.0, 1.0), expected, atol=1e-6)

    def test_general_box_interior(self):
        params = AgentParams.general_box(2.0, -1.0, 1.0, -1.0, 1.0)
        lam = np.array([1.0, -1.0])
        sol = solve_agent_qp(params, lam)
        expected = np.array([-0.5, 0.5])  # y_t = -lam_t / alpha, strictly interior
        assert np.allclose(sol.y, expected, atol=1e-8)
        for d in (sol.mu_lo, sol.mu_hi, sol.nu_lo, sol.nu_hi):
            assert np.all(np.abs(d) < 1e-8)
        oracle = qp_oracle(lam, np.full(2, 2.0), np.full(2, -1.0), np.full(2, 1.0),
                           np.full(2, -1.0), np.full(2, 1.0))
        assert np.allclose(oracle, expected, atol=1e-6)

    def test_deterministic_bitwise(self):
        params, lam = random_box_instance(np.random.default_rng(7), 4)
        a = solve_agent_qp(params, lam)
        b = solve_agent_qp(params, lam)
        assert np.array_equal(a.y, b.y)
        assert np.array_equal(a.nu_lo, b.nu_lo)

    def test_infeasible_zero_excluded(self):
        with pytest.raises(InfeasibleModel):
            AgentParams.general_box(1.0, 0.5, 1.0).validate()
        with pytest.raises(InfeasibleModel):
            AgentParams.general_box(1.0, -1.0, 1.0, 0.2, 0.5).validate()
        with pytest.raises(InfeasibleModel):
            AgentParams.total_budget(1.0, -0.5).validate()
        with pytest.raises(InfeasibleModel):
            AgentParams.total_budget(ALPHA_MIN / 10, 1.0).validate()

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(123)
        for _ in range(25):
            T = int(rng.integers(2, 5))
            params, lam = random_box_instance(rng, T)
            sol = solve_agent_qp(params, lam)
            ref = qp_oracle(lam, np.full(T, params.alpha),
                            np.full(T, params.p_low), np.full(T, params.p_high),
                            np.full(T, params.e_low), np.full(T, params.e_high))
            assert np.max(np.abs(sol.y - ref)) < 1e-4

    def test_interior_scaling_linear_in_price(self):
        params = AgentParams.general_box(4.0, -10.0, 10.0, -20.0, 20.0)
        lam = np.array([1.0, -2.0, 0.5])
        sol = solve_agent_qp(params, lam)
        assert np.allclose(sol.y, -lam / 4.0, atol=1e-9)
        sol2 = solve_agent_qp(params, 2.0 * lam)
        assert np.allclose(sol2.y, 2.0 * sol.y, atol=1e-8)

    def test_complementarity_min_dual_slack(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            T = int(rng.integers(2, 5))
            params, lam = random_box_instance(rng, T)
            sol = solve_agent_qp(params, lam)
            cons = build_constraints(params, T)
            slack = cons.h - cons.g @ sol.y
            fam = [sol.mu_hi, sol.mu_lo, sol.nu_hi, sol.nu_lo]
            duals = np.array([fam[cons.family[j]][cons.index[j]]
                              for j in range(cons.h.size)])
            assert np.all(np.minimum(duals, slack) <= 1e-6)

    def test_budget_reduction_matches_expansion(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            T = int(rng.integers(2, 6))
            lam = rng.uniform(-3, 3, size=T)
            params = AgentParams.total_budget(rng.uniform(0.5, 4.0), rng.uniform(0.2, 2.0))
            direct = solve_agent_qp(params, lam)
            expanded = solve_agent_qp(expand_total_budget(params, T), lam)
            assert np.max(np.abs(direct.y - expanded.y)) < 1e-6

    def test_batch_matches_single(self):
        rng = np.random.default_rng(11)
        params = AgentParams.total_budget(2.0, 1.5)
        lam = rng.uniform(-3, 3, size=(6, 4))
        y, mu_hi, mu_lo, nu_hi, nu_lo, _ = solve_agent_qp_batch(params, lam)
        for i in range(6):
            single = solve_agent_qp(params, lam[i])
            assert np.max(np.abs(y[i] - single.y)) < 1e-9
            assert np.max(np.abs(nu_lo[i] - single.nu_lo)) < 1e-9

    def test_alpha_vec_override(self):
        params = AgentParams.general_box(1.0)
        lam = np.array([2.0, -3.0, 1.0])
        a = np.array([1.0, 2.0, 4.0])
        sol = solve_agent_qp(params, lam, alpha_vec=a)
        assert np.allclose(sol.y, -lam / a, atol=1e-9)
        with pytest.raises(InfeasibleModel):
            solve_agent_qp(params, lam, alpha_vec=np.array([1.0, -1.0, 1.0]))
        with pytest.raises(DimensionMismatch):
            solve_agent_qp(params, lam, alpha_vec=np.array([1.0, 1.0]))


class TestAsymmetric:
    def test_zero_price_zero_response(self):
        # every split variable sits exactly on its bound with a zero dual, so
        # the interior point lands within sqrt(complementarity target) of 0
        params = AgentParams.asymmetric(1.0, 2.0, 0.5)
        sol = solve_asymmetric(params, np.zeros(4), np.full(4, 3.0))
        assert np.allclose(sol.y, 0.0, atol=5e-6)

    def test_symmetric_unit_curvature(self):
        # effective curvature 1/(2-1) = 1, so min lam*y + y^2/2 at y = -1
        params = AgentParams.asymmetric(1.0, 1.0, 1.0)
        sol = solve_asymmetric(params, [1.0], [2.0])
        assert sol.y[0] == pytest.approx(-1.0, abs=1e-7)
        assert np.allclose(asymmetric_oracle([1.0], 1.0, 1.0, [2.0], 1.0), [-1.0], atol=1e-5)

    def test_increase_side_uses_alpha1(self):
        params = AgentParams.asymmetric(2.0, 1.0, 1.0)
        sol = solve_asymmetric(params, [-1.0], [3.0])
        assert sol.y[0] == pytest.approx(1.0, abs=1e-7)
        assert np.allclose(asymmetric_oracle([-1.0], 2.0, 1.0, [3.0], 1.0), [1.0], atol=1e-5)

    def test_effective_curvatures_exposed(self):
        params = AgentParams.asymmetric(3.0, 1.5, 1.0)
        d = np.array([2.0, 4.0])
        sol = solve_asymmetric(params, [0.5, -0.5], d)
        assert np.allclose(sol.curvature_pos, 3.0 / (d - 1.0))
        assert np.allclose(sol.curvature_neg, 1.5 / (d - 1.0))

    def test_ghost_demand_violation(self):
        params = AgentParams.asymmetric(1.0, 1.0, 2.0)
        with pytest.raises(GhostDemandViolation):
            solve_asymmetric(params, [1.0, 1.0], [3.0, 2.0005])

    def test_oracle_equivalence_random(self):
        rng = np.random.default_rng(321)
        for _ in range(10):
            T = int(rng.integers(1, 5))
            lam = rng.uniform(-3, 3, size=T)
            d = rng.uniform(2.0, 6.0, size=T)
            params = AgentParams.asymmetric(rng.uniform(0.5, 3.0),
                                            rng.uniform(0.5, 3.0), 1.0)
            sol = solve_asymmetric(params, lam, d)
            ref = asymmetric_oracle(lam, params.alpha1, params.alpha2, d, 1.0)
            assert np.max(np.abs(sol.y - ref)) < 1e-4

    def test_split_complementarity_holds(self):
        params = AgentParams.asymmetric(1.0, 2.0, 0.0)
        lam = np.array([1.5, -0.5, 0.0])
        sol = solve_asymmetric(params, lam, np.full(3, 2.0))
        y_pos, y_neg = np.maximum(sol.y, 0), np.maximum(-sol.y, 0)
        assert np.all(y_pos * y_neg < 1e-10)


class TestResidualsAndObjective:
    def test_solver_solution_certified(self):
        params = AgentParams.total_budget(1.0, 1.0)
        lam = np.array([1.0, 2.0])
        sol = solve_agent_qp(params, lam)
        res = kkt_residuals(sol, params, lam, np.full(2, 1.0))
        assert res.max <= TOL_KKT
        assert sol.kkt_residual <= TOL_KKT

    def test_constructed_primal_violation(self):
        params = AgentParams.general_box(1.0, -1.0, 1.0, -5.0, 5.0)
        lam = np.zeros(2)
        sol = solve_agent_qp(params, lam)
        sol.y = np.array([params.p_high + 1.0, 0.0])
        res = kkt_residuals(sol, params, lam, np.full(2, 1.0))
        assert res.primal == pytest.approx(1.0, abs=1e-9)

    def test_interior_perturbation_stationarity(self):
        # moving one coordinate by delta at an interior optimum leaves only
        # the alpha*delta stationarity defect
        params = AgentParams.general_box(2.0, -1.0, 1.0, -1.0, 1.0)
        lam = np.array([1.0, -1.0])
        sol = solve_agent_qp(params, lam)
        delta = 1e-3
        sol.y = sol.y + np.array([delta, 0.0])
        res = kkt_residuals(sol, params, lam, np.full(2, 2.0))
        assert res.stationarity == pytest.approx(2.0 * delta, rel=1e-6)

    def test_dimension_mismatch(self):
        params = AgentParams.general_box(1.0, -1.0, 1.0)
        sol = solve_agent_qp(params, [0.0, 0.0])
        with pytest.raises(DimensionMismatch):
            kkt_residuals(sol, params, [0.0, 0.0, 0.0], np.ones(3))

    def test_objective_examples(self):
        assert agent_objective(np.zeros(3), np.zeros(3), np.ones(3)) == 0.0
        assert agent_objective(np.array([1.0]), np.array([2.0]), np.array([4.0])) == 4.0
        # value at the oracle-verified budget optimum
        assert agent_objective(np.array([0.0, -1.0]), np.array([1.0, 2.0]),
                               np.ones(2)) == pytest.approx(-1.5)
        with pytest.raises(DimensionMismatch):
            agent_objective(np.zeros(2), np.zeros(3), np.ones(3))


class TestPriceSignal:
    def test_validation(self):
        with pytest.raises(InfeasibleModel):
            PriceSignal(np.array([1.0, np.inf]))
        with pytest.raises(DimensionMismatch):
            PriceSignal(np.zeros((2, 2)))
        assert len(PriceSignal(np.array([1.0, 2.0]))) == 2

    def test_accepted_by_solver(self):
        params = AgentParams.total_budget(1.0, 1.0)
        sol = solve_agent_qp(params, PriceSignal(np.array([1.0, 2.0])))
        assert np.allclose(sol.y, [0.0, -1.0], atol=1e-7)


def test_complementarity_margin_interior():
    params = AgentParams.general_box(2.0, -1.0, 1.0, -1.0, 1.0)
    lam = np.array([1.0, -1.0])
    sol = solve_agent_qp(params, lam)
    # distance to the nearest bound is 0.5, so the margin is 0.5
    assert complementarity_margin(sol, params, lam) == pytest.approx(0.5, abs=1e-6)

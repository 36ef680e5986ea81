import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cost_learning import (
    BasisCostModel, SymCostConfig, align_gauge, basis_gradient, entropic_ot, fit_cost_basis,
    fit_cost_symmetric, imot_gradient, imot_objective, learn_cost_basis, learn_cost_homogeneous,
    learn_cost_symmetric, soft_threshold, sym_prox,
)
from errors import ConvergenceError, DomainError
from tree_model import StateSpace


def _line(n=5, spacing=0.5):
    return StateSpace(np.column_stack([spacing * np.arange(n), np.zeros(n)]))


def _forward(C, mu, nu, eps=1.0):
    plan, _, _ = entropic_ot(C, mu, nu, eps, tol=1e-13)
    return plan


def test_sym_prox_examples(rng):
    assert_allclose(sym_prox([[1.0, 2.0], [4.0, 3.0]]), [[0.0, 3.0], [3.0, 0.0]])
    A = rng.normal(size=(4, 4))
    B = rng.normal(size=(4, 4))
    assert_allclose(sym_prox(sym_prox(A)), sym_prox(A))
    assert np.linalg.norm(sym_prox(A) - sym_prox(B)) <= np.linalg.norm(A - B) + 1e-12
    with pytest.raises(DomainError):
        sym_prox(np.zeros((2, 3)))


def test_soft_threshold_examples():
    assert soft_threshold(0.5, 1.0) == 0.0
    assert soft_threshold(2.0, 0.5) == 1.5
    assert soft_threshold(-2.0, 0.5) == -1.5
    assert_allclose(soft_threshold([3.0, -0.1, 0.0], 1.0), [2.0, 0.0, 0.0])


def test_entropic_ot_matches_marginals(make_marginal, make_sym_cost):
    mu, nu = make_marginal(4), make_marginal(4)
    C = make_sym_cost(4)
    plan, a, b = entropic_ot(C, mu, nu, 0.5)
    assert_allclose(plan.sum(axis=1), mu, atol=1e-9)
    assert_allclose(plan.sum(axis=0), nu, atol=1e-9)
    # first-order condition of the dual objective
    d_a, d_b, _ = imot_gradient(C, a, b, plan, mu, nu, 0.5)
    assert_allclose(d_a, 0.0, atol=1e-9)
    assert_allclose(d_b, 0.0, atol=1e-9)


def test_imot_objective_at_zero():
    flow = np.full((3, 3), 1.0 / 9)
    mu = np.full(3, 1.0 / 3)
    assert imot_objective(np.zeros((3, 3)), np.zeros(3), np.zeros(3), flow, mu, mu, 1.0) == pytest.approx(9.0)


def test_imot_gradient_matches_finite_differences(rng, make_marginal, make_sym_cost):
    eps, h = 0.7, 1e-5
    for _ in range(100):
        mu, nu = make_marginal(3), make_marginal(3)
        C = make_sym_cost(3)
        flow = _forward(C + 0.3, mu, nu, eps)
        a, b = rng.normal(scale=0.2, size=3), rng.normal(scale=0.2, size=3)
        d_a, d_b, d_C = imot_gradient(C, a, b, flow, mu, nu, eps)

        def F(C_, a_, b_):
            return imot_objective(C_, a_, b_, flow, mu, nu, eps)

        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            assert (F(C, a + e, b) - F(C, a - e, b)) / (2 * h) == pytest.approx(d_a[i], rel=1e-4, abs=1e-8)
            assert (F(C, a, b + e) - F(C, a, b - e)) / (2 * h) == pytest.approx(d_b[i], rel=1e-4, abs=1e-8)
        for i in range(3):
            for j in range(3):
                E = np.zeros((3, 3))
                E[i, j] = h
                assert (F(C + E, a, b) - F(C - E, a, b)) / (2 * h) == pytest.approx(d_C[i, j], rel=1e-4, abs=1e-8)


def test_basis_gradient_matches_finite_differences(rng, make_marginal):
    eps, h = 1.0, 1e-5
    model = BasisCostModel.from_state_space(_line(4))
    for _ in range(100):
        mu, nu = make_marginal(4), make_marginal(4)
        flow = _forward(model.cost(rng.uniform(0.0, 0.5, size=model.Q)), mu, nu, eps)
        beta = rng.uniform(0.0, 0.5, size=model.Q)
        _, a, b = entropic_ot(model.cost(beta), mu, nu, eps)
        grad = basis_gradient(beta, model.bases, a, b, flow, eps)
        for k in range(model.Q):
            e = np.zeros(model.Q)
            e[k] = h
            up = imot_objective(model.cost(beta + e), a, b, flow, mu, nu, eps)
            down = imot_objective(model.cost(beta - e), a, b, flow, mu, nu, eps)
            assert (up - down) / (2 * h) == pytest.approx(grad[k], rel=1e-4, abs=1e-8)


def test_symmetric_independent_coupling_gives_zero_cost(make_marginal):
    mu, nu = make_marginal(4), make_marginal(4)
    state = fit_cost_symmetric(np.outer(mu, nu), mu, nu, SymCostConfig(1.0))
    assert_allclose(state.cost, 0.0, atol=1e-9)
    assert np.abs(state.plan - np.outer(mu, nu)).sum() <= 1e-8


def test_symmetric_round_trip(make_marginal, make_sym_cost):
    config = SymCostConfig(1.0, tol=1e-9, max_iters=50_000)
    for _ in range(20):
        C_true = make_sym_cost(5)
        mu, nu = make_marginal(5), make_marginal(5)
        flow = _forward(C_true, mu, nu)
        state = fit_cost_symmetric(flow, mu, nu, config)
        assert np.abs(state.plan - flow).sum() <= 1e-6
        assert np.allclose(state.cost, state.cost.T)
        assert np.all(np.diag(state.cost) == 0)
        assert np.abs(align_gauge(state.cost, C_true) - C_true).max() <= 1e-4
        assert state.clamped == 0


def test_symmetric_residual_trace_decreases(make_marginal, make_sym_cost):
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(make_sym_cost(5), mu, nu)
    state = fit_cost_symmetric(flow, mu, nu, SymCostConfig(1.0, max_iters=50_000))
    assert state.residual_trace[-1] <= 1e-8
    assert state.residual_trace[-1] <= state.residual_trace[0]


def test_pure_staying_flow_is_clamped(caplog):
    S = 5
    mu = np.full(S, 1.0 / S)
    config = SymCostConfig(1.0)
    with caplog.at_level(logging.WARNING, logger="cost_learning"):
        state = fit_cost_symmetric(np.eye(S) / S, mu, mu, config)
    assert state.clamped == S * S - S
    off = ~np.eye(S, dtype=bool)
    assert_allclose(state.cost[off], config.c_max)
    assert "Clamped 20 cost entries" in caplog.text
    assert_allclose(state.plan, np.eye(S) / S, atol=1e-12)


def test_symmetric_rejects_bad_flows(make_marginal):
    mu = make_marginal(3)
    with pytest.raises(DomainError, match="row/column sums"):
        learn_cost_symmetric(np.full((3, 3), 1.0 / 9), mu, mu, SymCostConfig(1.0))
    with pytest.raises(DomainError, match="mu_t must have mass 1"):
        fit_cost_symmetric(np.full((3, 3), 1.0 / 9), 2 * mu, mu, SymCostConfig(1.0), strict=False)


def test_empty_states_sit_at_c_max(make_sym_cost):
    config = SymCostConfig(1.0, tol=1e-10, max_iters=50_000)
    C_true = make_sym_cost(3)
    mu = np.array([0.4, 0.6, 0.0])
    flow = np.zeros((3, 3))
    flow[:2, :2] = _forward(C_true[:2, :2], mu[:2], mu[:2])
    state = fit_cost_symmetric(flow, mu, mu, config)
    assert np.abs(state.plan - flow).sum() <= 1e-8
    assert state.cost[0, 1] == pytest.approx(C_true[0, 1], abs=1e-6)
    assert_allclose(state.cost[2, :2], config.c_max)
    assert_allclose(state.cost[:2, 2], config.c_max)
    assert state.clamped == 0


def test_loose_fit_keeps_pairwise_products_of_the_flow(make_marginal, make_sym_cost):
    mu, nu = make_marginal(4), make_marginal(4)
    flow = _forward(make_sym_cost(4), mu, nu)
    mu2, nu2 = 0.8 * mu + 0.05, 0.8 * nu + 0.05
    with pytest.raises(DomainError, match="row/column sums"):
        fit_cost_symmetric(flow, mu2, nu2, SymCostConfig(1.0))

    config = SymCostConfig(1.0, tol=1e-12, max_iters=50_000)
    state = fit_cost_symmetric(flow, mu2, nu2, config, strict=False)
    assert state.iterations < config.max_iters
    assert_allclose(state.plan.sum(axis=1), mu2, atol=1e-9)
    assert_allclose(state.plan.sum(axis=0), nu2, atol=1e-9)
    off = ~np.eye(4, dtype=bool)
    assert_allclose((state.plan * state.plan.T)[off], (flow * flow.T)[off], rtol=1e-4)
    assert np.allclose(state.cost, state.cost.T)


def test_symmetric_non_convergence(make_marginal, make_sym_cost):
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(make_sym_cost(5, scale=3.0), mu, nu)
    with pytest.raises(ConvergenceError) as info:
        fit_cost_symmetric(flow, mu, nu, SymCostConfig(1.0, tol=1e-14, max_iters=2))
    assert info.value.iterations == 2
    assert info.value.residual > 1e-14


def test_symmetric_plans_do_not_depend_on_the_start(make_marginal, make_sym_cost):
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(make_sym_cost(5), mu, nu)
    config = SymCostConfig(1.0, tol=1e-10, max_iters=50_000)
    a = fit_cost_symmetric(flow, mu, nu, config)
    b = fit_cost_symmetric(flow, mu, nu, config, init_cost=make_sym_cost(5, scale=4.0))
    assert np.abs(a.plan - b.plan).sum() <= 1e-6
    assert_allclose(a.cost, b.cost, atol=1e-4)


def test_basis_recovers_single_basis_support(make_marginal):
    model = BasisCostModel.from_state_space(_line(5, spacing=1.0), gamma=1e-4)
    assert model.Q == 4
    for _ in range(3):
        mu, nu = make_marginal(5), make_marginal(5)
        flow = _forward(model.cost([0.0, 0.0, 0.0, 0.2]), mu, nu)
        state = fit_cost_basis(flow, mu, nu, model, 1.0)
        assert np.flatnonzero(state.beta).tolist() == [3]
        assert state.beta[3] == pytest.approx(0.2, abs=1e-3)
        assert state.residual <= 1e-4


def test_basis_without_penalty_reconstructs_the_plan(make_marginal):
    model = BasisCostModel.from_state_space(_line(5, spacing=1.0), gamma=0.0)
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(model.cost([0.0, 0.0, 0.0, 0.2]), mu, nu)
    state = fit_cost_basis(flow, mu, nu, model, 1.0)
    assert state.residual <= 1e-5
    assert state.iterations < 20_000


def test_basis_without_penalty_reconstructs_exactly(make_marginal):
    model = BasisCostModel.from_state_space(_line(5), exponents=(2,), gamma=0.0)
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(model.cost([0.7]), mu, nu)
    state = fit_cost_basis(flow, mu, nu, model, 1.0, tol=1e-10)
    assert state.beta[0] == pytest.approx(0.7, abs=1e-6)
    assert state.residual <= 1e-6


def test_basis_objective_never_increases(make_marginal):
    model = BasisCostModel.from_state_space(_line(5), gamma=1e-3)
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(model.cost([0.0, 0.3, 0.2, 0.0]), mu, nu)
    state = fit_cost_basis(flow, mu, nu, model, 1.0, tol=1e-6, max_iters=50_000)
    trace = state.objective_trace
    assert len(trace) == state.iterations + 1
    assert all(b <= a + 1e-10 for a, b in zip(trace, trace[1:]))


def test_large_penalty_zeroes_beta(make_marginal):
    model = BasisCostModel.from_state_space(_line(5), gamma=1e3)
    mu, nu = make_marginal(5), make_marginal(5)
    flow = _forward(model.cost([0.0, 0.0, 1.0, 0.0]), mu, nu)
    beta, C = learn_cost_basis(flow, mu, nu, model, 1.0)
    assert np.all(beta == 0.0)
    assert np.all(C == 0.0)


def test_basis_model_validation():
    space = _line(3)
    with pytest.raises(DomainError):
        BasisCostModel((np.ones((3, 3)),), [0.0])
    with pytest.raises(DomainError):
        BasisCostModel((space.distance_matrix(),), [0.0, 1.0])
    with pytest.raises(DomainError):
        BasisCostModel.from_state_space(space, gamma=-1.0)
    model = BasisCostModel.from_state_space(space, exponents=(1, 2))
    assert model.Q == 2
    assert_allclose(model.project(model.cost([0.4, 1.5])), [0.4, 1.5], atol=1e-10)
    # 0.5 spacing: |D^1|_F^2 = 4 * 0.25 + 2 * 1 = 3 beats |D^2|_F^2 = 2.25
    assert model.default_rho() == pytest.approx(1.0 / 6.0)


def test_homogeneous_cost_matches_shared_truth(make_marginal, make_sym_cost):
    C_true = make_sym_cost(4)
    marginals, flows = [], []
    for _ in range(3):
        mu, nu = make_marginal(4), make_marginal(4)
        marginals.append((mu, nu))
        flows.append(_forward(C_true, mu, nu))
    fit = learn_cost_homogeneous(flows, marginals, SymCostConfig(1.0, tol=1e-10, max_iters=50_000))
    assert fit.converged
    assert_allclose(fit.cost, C_true, atol=1e-4)
    assert max(fit.residuals) <= 1e-6

    # an interval-wise fit reproduces each flow on its own
    for flow, (mu, nu) in zip(flows, marginals):
        state = fit_cost_symmetric(flow, mu, nu, SymCostConfig(1.0, tol=1e-9, max_iters=50_000))
        assert_allclose(state.cost, C_true, atol=1e-4)


def test_homogeneous_requires_matching_inputs(make_marginal):
    mu = make_marginal(3)
    with pytest.raises(DomainError):
        learn_cost_homogeneous([np.outer(mu, mu)], [], SymCostConfig(1.0))


def test_homogeneous_reports_unconverged_fit(make_marginal, make_sym_cost, caplog):
    mu, nu = make_marginal(4), make_marginal(4)
    flow = _forward(make_sym_cost(4, scale=3.0), mu, nu)
    with caplog.at_level(logging.WARNING, logger="cost_learning"):
        fit = learn_cost_homogeneous([flow], [(mu, nu)], SymCostConfig(1.0, tol=1e-14, max_iters=2))
    assert not fit.converged
    assert "stopped after 2 iterations" in caplog.text

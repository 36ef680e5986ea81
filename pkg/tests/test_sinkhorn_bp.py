import itertools
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

import sinkhorn_bp
from errors import ConvergenceError, DomainError, TreeValidationError, UnderflowError
from sinkhorn_bp import (
    SbpConfig, dense_cost_tensor, dense_inputs, free_energy, project_dense, project_dense_pair, solve,
    solve_dense,
)
from tree_model import TreeModel


def _single_edge(mu1, mu2, cost):
    return TreeModel((len(mu1), len(mu2)), ((0, 1),), (np.asarray(cost, dtype=float),),
                     {0: np.asarray(mu1, dtype=float), 1: np.asarray(mu2, dtype=float)})


def _dense_flows(model, eps):
    costs, marginals, sizes = dense_inputs(model)
    plan = solve_dense(costs, marginals, eps, sizes=sizes)
    return plan, {eid: project_dense_pair(plan, u, v) for eid, (u, v) in enumerate(model.edges)}


def test_single_edge_uniform_zero_cost():
    sol = solve(_single_edge([0.5, 0.5], [0.5, 0.5], np.zeros((2, 2))), SbpConfig(1.0))
    assert_allclose(sol.edge_flows[0], np.full((2, 2), 0.25), atol=1e-12)


def test_single_edge_forced_plan():
    sol = solve(_single_edge([1.0, 0.0], [0.0, 1.0], [[3.0, 1.0], [0.5, 2.0]]), SbpConfig(1.0))
    assert_allclose(sol.edge_flows[0], [[0.0, 1.0], [0.0, 0.0]], atol=1e-12)


def test_chain_matches_dense_oracle(rng):
    S, eps = 3, 1.0
    costs = [rng.uniform(0.1, 2.0, size=(S, S)) for _ in range(2)]
    marginals = {j: rng.dirichlet(np.ones(S)) for j in range(3)}
    model = TreeModel((S, S, S), ((0, 1), (1, 2)), tuple(costs), marginals)
    sol = solve(model, SbpConfig(eps, tol=1e-12))
    plan, flows = _dense_flows(model, eps)
    for eid in range(2):
        assert np.abs(sol.edge_flows[eid] - flows[eid]).sum() <= 1e-8
    for j in range(3):
        assert np.abs(sol.node_marginals[j] - project_dense(plan, j)).sum() <= 1e-8


def test_random_trees_match_dense_oracle(rng, random_tree):
    for k in range(50):
        n_nodes = int(rng.integers(2, 7))
        eps = float(rng.choice([0.5, 1.0, 2.0]))
        model = random_tree(n_nodes)
        sol = solve(model, SbpConfig(eps, tol=1e-12))
        plan, flows = _dense_flows(model, eps)
        for j in range(model.n_nodes):
            assert np.abs(sol.node_marginals[j] - project_dense(plan, j)).sum() <= 1e-8, (k, j)
        for eid in flows:
            assert np.abs(sol.edge_flows[eid] - flows[eid]).sum() <= 1e-8, (k, eid)


def test_constraints_and_local_conservation(random_tree):
    tol = 1e-9
    for _ in range(10):
        model = random_tree(6)
        sol = solve(model, SbpConfig(1.0, tol=tol))
        assert sol.final_residual <= tol
        for j in model.gamma:
            assert np.abs(sol.node_marginals[j] - model.constrained[j]).sum() <= tol
        for eid, (u, v) in enumerate(model.edges):
            flow = sol.edge_flows[eid]
            assert flow.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.abs(flow.sum(axis=1) - sol.node_marginals[u]).max() <= 10 * tol
            assert np.abs(flow.sum(axis=0) - sol.node_marginals[v]).max() <= 10 * tol


def test_residual_trace_is_monotone(random_tree):
    # two constrained nodes: alternating projections, the L1 error can only shrink from sweep to sweep
    for _ in range(10):
        sol = solve(random_tree(6, cost_scale=4.0, n_constrained=2), SbpConfig(0.5, tol=1e-10))
        trace = sol.residual_trace[1:]
        assert trace[-1] <= 1e-10
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_residual_is_measured_after_a_full_pass(random_tree):
    model = random_tree(6, cost_scale=4.0, n_constrained=4)
    sol = solve(model, SbpConfig(0.5, tol=1e-10))
    assert len(sol.residual_trace) == sol.sweeps_used + 1
    assert sol.residual_trace[-1] == sol.final_residual
    exact = max(float(np.abs(sol.node_marginals[j] - model.constrained[j]).sum()) for j in model.gamma)
    assert exact == pytest.approx(sol.final_residual, abs=1e-12)


def test_edge_potential_scaling_invariance(random_tree):
    model = random_tree(5, n_constrained=3)
    costs = list(model.edge_costs)
    # scaling a kernel by c shifts the cost by -eps * ln c
    costs[0] = costs[0] - np.log(7.0)
    shifted = model.with_costs(costs)
    a = solve(model, SbpConfig(1.0, tol=1e-12))
    b = solve(shifted, SbpConfig(1.0, tol=1e-12))
    for j in range(model.n_nodes):
        assert_allclose(a.node_marginals[j], b.node_marginals[j], atol=1e-10)
    for eid in a.edge_flows:
        assert_allclose(a.edge_flows[eid], b.edge_flows[eid], atol=1e-10)


def test_kkt_form_of_the_plan(random_tree):
    eps = 1.0
    model = random_tree(4, sizes=(2, 3))
    sol = solve(model, SbpConfig(eps, tol=1e-12))
    costs, _, sizes = dense_inputs(model)
    tensor = np.exp(-dense_cost_tensor(costs, sizes) / eps)
    for j, b in sol.scalings.items():
        shape = [1] * len(sizes)
        shape[j] = sizes[j]
        tensor = tensor * b.reshape(shape)
    tensor /= tensor.sum()
    plan, _ = _dense_flows(model, eps)
    assert np.abs(tensor - plan).sum() <= 1e-8


def test_log_domain_agrees_with_linear(random_tree):
    model = random_tree(6)
    lin = solve(model, SbpConfig(1.0, tol=1e-11, log_domain=False))
    log = solve(model, SbpConfig(1.0, tol=1e-11, log_domain=True))
    assert log.log_domain and not lin.log_domain
    for eid in lin.edge_flows:
        assert_allclose(lin.edge_flows[eid], log.edge_flows[eid], atol=1e-9)


def test_tiny_kernel_entries_need_log_domain():
    mu = np.array([0.5, 0.5])
    # exp(-900) and below flush to zero in double precision
    cost = np.array([[0.0, 900.0], [900.0, 1000.0]])
    model = TreeModel((2, 2, 2), ((0, 1), (1, 2)), (cost, cost), {0: mu, 2: mu})
    with pytest.raises(UnderflowError, match="log_domain=True"):
        solve(model, SbpConfig(1.0, log_domain=False))
    sol = solve(model, SbpConfig(1.0, tol=1e-10, log_domain=True))
    assert sol.log_domain
    assert sol.final_residual <= 1e-10
    assert_allclose(sol.edge_flows[0].sum(axis=1), mu, atol=1e-9)



def test_auto_domain_retries_in_log_domain(monkeypatch, caplog):
    mu = np.array([0.5, 0.5])
    cost = np.array([[0.0, 900.0], [900.0, 1000.0]])
    model = TreeModel((2, 2, 2), ((0, 1), (1, 2)), (cost, cost), {0: mu, 2: mu})
    monkeypatch.setattr(sinkhorn_bp, "prefers_log_domain", lambda costs, eps: False)
    with caplog.at_level(logging.WARNING, logger="sinkhorn_bp"):
        sol = solve(model, SbpConfig(1.0, tol=1e-10))
    assert sol.log_domain
    assert sol.final_residual <= 1e-10
    assert "retrying in the log domain" in caplog.text


def test_warm_start_gives_same_answer(random_tree):
    model = random_tree(6)
    cold = solve(model, SbpConfig(1.0, tol=1e-12))
    warm = solve(model, SbpConfig(1.0, tol=1e-12), init_scalings=cold.scalings)
    assert warm.sweeps_used <= 2
    for eid in cold.edge_flows:
        assert_allclose(cold.edge_flows[eid], warm.edge_flows[eid], atol=1e-8)


def test_non_convergence_reports_residual(random_tree):
    model = random_tree(6, n_constrained=4, cost_scale=6.0)
    with pytest.raises(ConvergenceError) as info:
        solve(model, SbpConfig(0.2, tol=1e-14, max_sweeps=1))
    assert info.value.residual > 1e-14
    assert info.value.exit_code == 3


def test_invalid_tree_is_rejected():
    cost = np.zeros((2, 2))
    model = TreeModel((2, 2, 2), ((0, 1), (1, 2), (2, 0)), (cost, cost, cost))
    with pytest.raises(TreeValidationError, match="cycle"):
        solve(model, SbpConfig(1.0))


def test_free_energy_matches_dense_plan(random_tree):
    eps = 0.8
    model = random_tree(5, sizes=(2, 3))
    sol = solve(model, SbpConfig(eps, tol=1e-12))
    costs, _, sizes = dense_inputs(model)
    plan, _ = _dense_flows(model, eps)
    C = dense_cost_tensor(costs, sizes)
    positive = plan > 0
    dense_value = float((C * plan).sum() + eps * (plan[positive] * np.log(plan[positive])).sum())
    assert free_energy(model, sol, eps) == pytest.approx(dense_value, abs=1e-7)


def test_project_dense_examples(rng):
    assert_allclose(project_dense(np.ones((2, 2, 2)), 1), [4.0, 4.0])
    a, b, c = rng.uniform(size=2), rng.uniform(size=3), rng.uniform(size=4)
    tensor = np.einsum("i,j,k->ijk", a, b, c)
    assert_allclose(project_dense(tensor, 1), a.sum() * c.sum() * b)
    random = rng.uniform(size=(3, 3, 3))
    loops = np.zeros(3)
    for i, j, k in itertools.product(range(3), repeat=3):
        loops[j] += random[i, j, k]
    assert_allclose(project_dense(random, 1), loops)


def test_project_dense_size_guard():
    with pytest.raises(DomainError):
        project_dense(np.zeros((11,) * 6), 0)


def test_solve_dense_bimarginal_is_classic_sinkhorn(rng):
    mu, nu = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(4))
    C = rng.uniform(size=(3, 4))
    plan = solve_dense({(0, 1): C}, {0: mu, 1: nu}, 1.0)
    assert_allclose(plan.sum(axis=1), mu, atol=1e-10)
    assert_allclose(plan.sum(axis=0), nu, atol=1e-10)
    # plan = diag(u) K diag(v): log-plan minus the cost is additively separable
    G = np.log(plan) + C
    assert_allclose(G - G[:, :1] - G[:1, :] + G[0, 0], 0.0, atol=1e-9)


def test_solve_dense_uniform_zero_cost():
    u = np.full(2, 0.5)
    plan = solve_dense({(0, 1): np.zeros((2, 2)), (1, 2): np.zeros((2, 2))}, {0: u, 1: u, 2: u}, 1.0)
    assert_allclose(plan, np.full((2, 2, 2), 0.125), atol=1e-12)

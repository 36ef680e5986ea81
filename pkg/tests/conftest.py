import numpy as np
import pytest

from tree_model import ObservationSet, StateSpace, TreeModel


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def random_marginal(rng, size):
    return rng.dirichlet(np.ones(size)) * 0.9 + 0.1 / size


def random_symmetric_cost(rng, size, scale=1.0):
    C = rng.uniform(0.1, 2.0, size=(size, size)) * scale
    C = 0.5 * (C + C.T)
    np.fill_diagonal(C, 0.0)
    return C


def make_random_tree(rng, n_nodes, sizes=(2, 3, 4), cost_scale=2.0, n_constrained=None):
    """Random tree: node k > 0 hangs off a random earlier node; random costs and constrained marginals."""
    node_sizes = [int(rng.choice(sizes)) for _ in range(n_nodes)]
    edges, costs = [], []
    for k in range(1, n_nodes):
        parent = int(rng.integers(0, k))
        edge = (parent, k) if rng.random() < 0.5 else (k, parent)
        edges.append(edge)
        costs.append(rng.uniform(0.0, cost_scale, size=(node_sizes[edge[0]], node_sizes[edge[1]])))
    if n_constrained is None:
        n_constrained = int(rng.integers(1, n_nodes + 1))
    gamma = sorted(int(j) for j in rng.choice(n_nodes, size=n_constrained, replace=False))
    constrained = {j: random_marginal(rng, node_sizes[j]) for j in gamma}
    return TreeModel(tuple(node_sizes), tuple(edges), tuple(costs), constrained)


@pytest.fixture
def random_tree(rng):
    def factory(n_nodes, **kwargs):
        return make_random_tree(rng, n_nodes, **kwargs)
    return factory


@pytest.fixture
def grid3():
    return StateSpace.grid(3)


@pytest.fixture
def small_observations():
    return ObservationSet.single([
        [4.0, 3.0, 2.0, 1.0],
        [3.0, 3.0, 2.0, 2.0],
        [2.0, 3.0, 3.0, 2.0],
    ])


@pytest.fixture
def make_marginal(rng):
    return lambda size: random_marginal(rng, size)


@pytest.fixture
def make_sym_cost(rng):
    return lambda size, scale=1.0: random_symmetric_cost(rng, size, scale)

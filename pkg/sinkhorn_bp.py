# sinkhorn_bp.py
"""
E-step solver: Sinkhorn belief propagation on a tree-structured entropic MOT.

The plan tensor is M = K ⊙ B with K the product of edge Gibbs kernels and
B the outer product of per-node scalings b_j (ones off the constrained set).
Messages are passed along tree edges; a Sinkhorn update at a constrained node
j rescales b_j so that its belief matches mu_j. Between two constrained
nodes only the messages on the connecting path are refreshed, and a full
collect/distribute pass closes every sweep so the residual is exact.

Two backends share the schedule: linear domain with per-message
normalization (default) and log domain.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import networkx as nx
import numpy as np
from scipy.special import logsumexp, xlogy

from constants import MSG_USE_LOG_DOMAIN
from errors import ConvergenceError, DomainError, TreeValidationError, UnderflowError
from mot_core import eps_value, gibbs_kernel, logsumexp_matvec, prefers_log_domain, safe_log
from tree_model import TreeModel, validate_tree

logger = logging.getLogger(__name__)

UNDERFLOW = 1e-300
DENSE_LIMIT = 10 ** 6


@dataclass(frozen=True)
class SbpConfig:
    eps: float
    tol: float = 1e-8
    max_sweeps: int = 10_000
    log_domain: bool | None = None  # None: decided from the costs

    def __post_init__(self):
        object.__setattr__(self, "eps", eps_value(self.eps))
        if not self.tol > 0:
            raise DomainError(f"tol must be positive, got {self.tol}")
        if self.max_sweeps < 1:
            raise DomainError(f"max_sweeps must be >= 1, got {self.max_sweeps}")


@dataclass
class SbpSolution:
    node_marginals: dict
    edge_flows: dict
    scalings: dict  # j in Gamma -> b_j, up to a positive constant (max entry 1)
    sweeps_used: int
    final_residual: float
    residual_trace: list = field(default_factory=list)
    log_domain: bool = False


class _LinearOps:
    """Messages and scalings as normalized positive vectors."""
    log_domain = False

    @staticmethod
    def kernel(cost, eps):
        return gibbs_kernel(cost, eps)

    @staticmethod
    def unit(size):
        return np.ones(size)

    @staticmethod
    def combine(h, m):
        return h * m

    @staticmethod
    def send(K, h, forward):
        m = K.T @ h if forward else K @ h
        total = m.sum()
        if not np.isfinite(total) or total <= 0:
            raise UnderflowError(MSG_USE_LOG_DOMAIN, residual=np.inf, iterations=0)
        m = m / total
        if m.min() < UNDERFLOW:
            raise UnderflowError(MSG_USE_LOG_DOMAIN, residual=np.inf, iterations=0)
        return m

    @staticmethod
    def rescale(mu, incoming):
        if incoming.min() < UNDERFLOW:
            raise UnderflowError(MSG_USE_LOG_DOMAIN, residual=np.inf, iterations=0)
        return mu / incoming

    @staticmethod
    def to_prob(h):
        return h / h.sum()

    @staticmethod
    def pair(K, hu, hv):
        flow = hu[:, None] * K * hv[None, :]
        return flow / flow.sum()

    @staticmethod
    def to_scaling(b):
        return b / b.max()


class _LogOps:
    """Messages and scalings stored as logarithms."""
    log_domain = True

    @staticmethod
    def kernel(cost, eps):
        return -np.asarray(cost, dtype=float) / eps

    @staticmethod
    def unit(size):
        return np.zeros(size)

    @staticmethod
    def combine(h, m):
        return h + m

    @staticmethod
    def send(logK, h, forward):
        m = logsumexp_matvec(logK.T, h) if forward else logsumexp_matvec(logK, h)
        return m - logsumexp(m)

    @staticmethod
    def rescale(mu, incoming):
        return safe_log(mu) - incoming

    @staticmethod
    def to_prob(h):
        return np.exp(h - logsumexp(h))

    @staticmethod
    def pair(logK, hu, hv):
        z = logK + hu[:, None] + hv[None, :]
        return np.exp(z - logsumexp(z))

    @staticmethod
    def to_scaling(log_b):
        return np.exp(log_b - log_b.max())


class MessageStore:
    """Directed-edge messages M_{v->u}, each normalized to sum 1 (or logsumexp 0)."""

    def __init__(self, model: TreeModel, ops):
        self.ops = ops
        self.messages = {}
        for u, v in model.edges:
            self.messages[(u, v)] = self._uniform(model.node_sizes[v])
            self.messages[(v, u)] = self._uniform(model.node_sizes[u])

    def _uniform(self, size: int) -> np.ndarray:
        if self.ops.log_domain:
            return np.full(size, -np.log(size))
        return np.full(size, 1.0 / size)

    def __getitem__(self, key):
        return self.messages[key]

    def __setitem__(self, key, value):
        self.messages[key] = value


class SinkhornBP:
    def __init__(self, model: TreeModel, config: SbpConfig, init_scalings: Mapping | None = None):
        report = validate_tree(model)
        if not report:
            raise TreeValidationError(report)

        self.model = model
        self.config = config
        self.eps = config.eps
        log_domain = config.log_domain
        if log_domain is None:
            log_domain = prefers_log_domain(model.edge_costs, self.eps)
        self.ops = _LogOps if log_domain else _LinearOps

        self.nbrs = model.neighbors()
        self.kernels = [self.ops.kernel(c, self.eps) for c in model.edge_costs]
        self.tree = nx.Graph()
        self.tree.add_nodes_from(range(model.n_nodes))
        for eid, (u, v) in enumerate(model.edges):
            self.tree.add_edge(u, v, eid=eid)
        self.bfs = list(nx.bfs_edges(self.tree, 0))
        self.gamma = model.gamma
        self.store = MessageStore(model, self.ops)

        self.scaling = {}
        for j in self.gamma:
            size = model.node_sizes[j]
            if init_scalings is not None and j in init_scalings:
                b = np.asarray(init_scalings[j], dtype=float)
                self.scaling[j] = safe_log(b) if self.ops.log_domain else b.copy()
            else:
                self.scaling[j] = self.ops.unit(size)

    def _belief(self, j: int, exclude: int | None = None) -> np.ndarray:
        h = self.scaling.get(j)
        h = self.ops.unit(self.model.node_sizes[j]) if h is None else h
        for k, _ in self.nbrs[j]:
            if k != exclude:
                h = self.ops.combine(h, self.store[(k, j)])
        return h

    def _send(self, u: int, v: int):
        eid = self.tree.edges[u, v]["eid"]
        h = self._belief(u, exclude=v)
        forward = self.model.edges[eid] == (u, v)
        self.store[(u, v)] = self.ops.send(self.kernels[eid], h, forward)

    def _full_pass(self):
        for parent, child in reversed(self.bfs):
            self._send(child, parent)
        for parent, child in self.bfs:
            self._send(parent, child)

    def _refresh_path(self, source: int, target: int):
        path = nx.shortest_path(self.tree, source, target)
        for a, b in zip(path[:-1], path[1:]):
            self._send(a, b)

    def _update_scaling(self, j: int):
        incoming = self.ops.unit(self.model.node_sizes[j])
        for k, _ in self.nbrs[j]:
            incoming = self.ops.combine(incoming, self.store[(k, j)])
        self.scaling[j] = self.ops.rescale(self.model.constrained[j], incoming)

    def _residual(self) -> float:
        if not self.gamma:
            return 0.0
        return max(
            float(np.abs(self.ops.to_prob(self._belief(j)) - self.model.constrained[j]).sum())
            for j in self.gamma
        )

    def _sweep(self):
        previous = None
        for j in self.gamma:
            if previous is not None:
                self._refresh_path(previous, j)
            self._update_scaling(j)
            previous = j
        self._full_pass()

    def run(self) -> SbpSolution:
        sweeps = 0
        residual = np.inf
        trace = []
        try:
            self._full_pass()
            residual = self._residual()
            trace.append(residual)
            while residual > self.config.tol:
                if sweeps >= self.config.max_sweeps:
                    raise ConvergenceError(
                        f"Sinkhorn BP did not converge in {sweeps} sweeps (residual {residual:.3e})",
                        residual=residual, iterations=sweeps,
                    )
                self._sweep()
                sweeps += 1
                residual = self._residual()
                trace.append(residual)
                logger.debug(f"SBP sweep {sweeps}: residual {residual:.3e}")
        except UnderflowError:
            raise UnderflowError(MSG_USE_LOG_DOMAIN, residual=residual, iterations=sweeps)

        logger.debug(f"SBP converged after {sweeps} sweeps (residual {residual:.3e})")
        return self._solution(sweeps, residual, trace)

    def _solution(self, sweeps: int, residual: float, trace: list) -> SbpSolution:
        model = self.model
        node_marginals = {j: self.ops.to_prob(self._belief(j)) for j in range(model.n_nodes)}
        edge_flows = {}
        for eid, (u, v) in enumerate(model.edges):
            hu = self._belief(u, exclude=v)
            hv = self._belief(v, exclude=u)
            edge_flows[eid] = self.ops.pair(self.kernels[eid], hu, hv)
        scalings = {j: self.ops.to_scaling(self.scaling[j]) for j in self.gamma}
        return SbpSolution(
            node_marginals=node_marginals,
            edge_flows=edge_flows,
            scalings=scalings,
            sweeps_used=sweeps,
            final_residual=residual,
            residual_trace=trace,
            log_domain=self.ops.log_domain,
        )


def solve(model: TreeModel, config: SbpConfig, init_scalings: Mapping | None = None) -> SbpSolution:
    """
    Run Sinkhorn belief propagation until every constrained marginal is matched within tol.
    With log_domain=None an underflowing linear-domain run is repeated in the log domain.
    """
    solver = SinkhornBP(model, config, init_scalings)
    try:
        return solver.run()
    except UnderflowError:
        if config.log_domain is not None or solver.ops.log_domain:
            raise
    logger.warning("Linear-domain Sinkhorn BP underflowed; retrying in the log domain")
    return SinkhornBP(model, replace(config, log_domain=True), init_scalings).run()


def free_energy(model: TreeModel, solution: SbpSolution, eps) -> float:
    """
    <C, M> + eps * sum(M ln M) of the plan, from its tree factorization:
    edge entropies minus (degree - 1) times node entropies.
    """
    eps = eps_value(eps)
    energy = 0.0
    entropy = 0.0
    for eid, cost in enumerate(model.edge_costs):
        flow = solution.edge_flows[eid]
        energy += float((cost * flow).sum())
        entropy += float(xlogy(flow, flow).sum())
    degree = {j: len(n) for j, n in model.neighbors().items()}
    for j, mu in solution.node_marginals.items():
        entropy -= (degree[j] - 1) * float(xlogy(mu, mu).sum())
    return energy + eps * entropy


# --- Dense oracles (small trees only) ---

def _check_dense_size(sizes):
    if int(np.prod(sizes, dtype=np.int64)) > DENSE_LIMIT:
        raise DomainError(f"dense tensor of shape {tuple(sizes)} exceeds the size guard ({DENSE_LIMIT})")


def project_dense(plan: np.ndarray, j: int) -> np.ndarray:
    """Marginal of the plan tensor on mode j."""
    plan = np.asarray(plan, dtype=float)
    _check_dense_size(plan.shape)
    axes = tuple(a for a in range(plan.ndim) if a != j)
    return plan.sum(axis=axes)


def project_dense_pair(plan: np.ndarray, u: int, v: int) -> np.ndarray:
    """Pairwise marginal on modes (u, v), rows over u."""
    axes = tuple(a for a in range(plan.ndim) if a not in (u, v))
    pair = plan.sum(axis=axes)
    return pair if u < v else pair.T


def dense_cost_tensor(costs: Mapping, sizes) -> np.ndarray:
    """Sum of pairwise edge costs lifted to the full tensor."""
    _check_dense_size(sizes)
    tensor = np.zeros(tuple(sizes))
    n = len(sizes)
    for (u, v), cost in costs.items():
        cost = np.asarray(cost, dtype=float)
        shape = [1] * n
        shape[u], shape[v] = sizes[u], sizes[v]
        lifted = cost if u < v else cost.T
        tensor = tensor + lifted.reshape(shape)
    return tensor


def dense_inputs(model: TreeModel):
    """(costs keyed by edge, marginals keyed by node, node sizes) of a TreeModel."""
    costs = {edge: cost for edge, cost in zip(model.edges, model.edge_costs)}
    return costs, dict(model.constrained), list(model.node_sizes)


def solve_dense(costs: Mapping, marginals: Mapping, eps, sizes=None, tol: float = 1e-11,
                max_iters: int = 100_000) -> np.ndarray:
    """
    Multi-marginal Sinkhorn on the materialized plan tensor:
    b_j <- b_j * mu_j / P_j(K ⊙ B) for every constrained j, until matched within tol.
    """
    eps = eps_value(eps)
    if sizes is None:
        n = 1 + max([max(e) for e in costs] + list(marginals))
        sizes = [0] * n
        for (u, v), cost in costs.items():
            sizes[u], sizes[v] = np.shape(cost)
        for j, mu in marginals.items():
            sizes[j] = len(mu)
    sizes = list(sizes)
    _check_dense_size(sizes)

    C = dense_cost_tensor(costs, sizes)
    K = np.exp(-(C - C.min()) / eps)
    n = len(sizes)
    gamma = sorted(marginals)
    b = {j: np.ones(sizes[j]) for j in gamma}

    def scaled():
        plan = K
        for j in gamma:
            shape = [1] * n
            shape[j] = sizes[j]
            plan = plan * b[j].reshape(shape)
        return plan

    if not gamma:
        return K / K.sum()

    residual = np.inf
    for it in range(1, max_iters + 1):
        for j in gamma:
            proj = project_dense(scaled(), j)
            mu = np.asarray(marginals[j], dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                b[j] = np.where(proj > 0, b[j] * mu / proj, 0.0)
        plan = scaled()
        residual = max(float(np.abs(project_dense(plan, j) - marginals[j]).sum()) for j in gamma)
        if residual <= tol:
            return plan
    raise ConvergenceError(f"dense Sinkhorn did not converge (residual {residual:.3e})",
                           residual=residual, iterations=max_iters)

# em_driver.py
"""
EM-type loop alternating Sinkhorn BP E-steps and inverse-OT M-steps.

E-step: build the HMM tree with the current transition costs, solve it, read
the hidden-edge flows M^t and hidden marginals mu_t. M-step: learn every
C^t independently from M^t and a pair of marginals with the configured
variant. By default the pair is the normalized observations at t and t+1,
pooled over replicas. On the hidden marginals the M-step returns the current
costs unchanged.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import logsumexp

from cost_learning import BasisCostModel, SymCostConfig, fit_cost_basis, fit_cost_symmetric
from constants import DEFAULT_EXPONENTS, VARIANTS
from errors import DomainError, PopflowError, SchemaError, StagnationError
from mot_core import as_matrix, eps_value
from sinkhorn_bp import SbpConfig, SbpSolution, free_energy, solve
from tree_model import ObservationSet, StateSpace, TreeModel, build_hmm_tree

logger = logging.getLogger(__name__)

InitCost = Literal["squared_distance", "uniform", "user"]
MStepMarginals = Literal["observed", "hidden"]


@dataclass(frozen=True)
class EmConfig:
    variant: str = "istc"
    eps: float = 1.0
    outer_iters: int = 30
    outer_tol: float = 1e-5
    init_cost: InitCost = "squared_distance"
    init_step_cost: float | None = None  # cost of a unit step, in units of eps
    mstep_marginals: MStepMarginals = "observed"
    user_cost: object = None  # one matrix, or one per interval
    seed: int = 0  # reserved; the EM path is deterministic
    sbp_tol: float = 1e-8
    max_sweeps: int = 10_000
    log_domain: bool | None = None
    sym_tol: float = 1e-8
    sym_max_iters: int = 5000
    exponents: tuple = DEFAULT_EXPONENTS
    gamma: float = 1e-3
    ista_tol: float = 1e-8
    ista_max_iters: int = 20_000
    single_pass: bool = False
    stagnation_patience: int = 5
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "eps", eps_value(self.eps))
        if self.variant not in VARIANTS:
            raise SchemaError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")
        if self.outer_iters < 1:
            raise SchemaError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.init_cost not in ("squared_distance", "uniform", "user"):
            raise SchemaError(f"unknown init_cost {self.init_cost!r}")
        if self.init_cost == "user" and self.user_cost is None:
            raise SchemaError("init_cost 'user' needs user_cost")
        if self.mstep_marginals not in ("observed", "hidden"):
            raise SchemaError(f"unknown mstep_marginals {self.mstep_marginals!r}")
        if self.workers < 1:
            raise SchemaError(f"workers must be >= 1, got {self.workers}")


@dataclass
class EmResult:
    flows: list
    marginals: list
    costs: list
    transition_matrices: list
    trace: list
    iterations: int
    converged: bool
    betas: list | None = None
    solution: SbpSolution | None = field(default=None, repr=False)
    model: TreeModel | None = field(default=None, repr=False)


def initial_costs(state_space: StateSpace, config: EmConfig, T: int) -> list:
    """One initial cost matrix per interval."""
    S = state_space.size
    if config.init_cost == "uniform":
        return [np.zeros((S, S)) for _ in range(T - 1)]

    if config.init_cost == "user":
        user = np.asarray(config.user_cost, dtype=float)
        matrices = [user] * (T - 1) if user.ndim == 2 else list(user)
        if len(matrices) != T - 1:
            raise DomainError(f"user_cost holds {len(matrices)} matrices, expected {T - 1}")
        return [as_matrix(c, "user_cost").copy() for c in matrices]

    d2 = state_space.distance_matrix(power=2.0)
    if config.init_step_cost is not None:
        scale = config.init_step_cost * config.eps
    else:
        off_diag = d2[~np.eye(S, dtype=bool)]
        median = float(np.median(off_diag)) if off_diag.size else 1.0
        scale = config.eps / median if median > 0 else 1.0
    return [scale * d2 for _ in range(T - 1)]


def transition_matrices(costs, eps) -> list:
    """A^t = row-normalized exp(-C^t / eps), computed in the log domain."""
    eps = eps_value(eps)
    result = []
    for C in costs:
        logK = -as_matrix(C, "cost") / eps
        result.append(np.exp(logK - logsumexp(logK, axis=1, keepdims=True)))
    return result


def extract_transition_matrices(result: EmResult, eps) -> list:
    return transition_matrices(result.costs, eps)


def _tag_iteration(err: PopflowError, iteration: int, step: str) -> PopflowError:
    err.details["iteration"] = iteration
    err.message = f"EM iteration {iteration} ({step}): {err.message}"
    err.args = (err.message,)
    return err


class EmRunner:
    def __init__(self, observations: ObservationSet, state_space: StateSpace, emission_cost, config: EmConfig):
        observations.require_every_step()
        if observations.S != state_space.size:
            raise DomainError(f"observations have {observations.S} states, state space has {state_space.size}")
        self.observations = observations
        self.state_space = state_space
        self.emission_cost = as_matrix(emission_cost, "emission_cost")
        self.config = config
        self.T = observations.T
        self.S = state_space.size
        self.sbp_config = SbpConfig(config.eps, tol=config.sbp_tol, max_sweeps=config.max_sweeps,
                                    log_domain=config.log_domain)
        self.basis = None
        if config.variant == "ista":
            self.basis = BasisCostModel.from_state_space(state_space, config.exponents, gamma=config.gamma)
        self.targets = None
        if config.mstep_marginals == "observed":
            self.targets = [observations.pooled(t) for t in range(self.T)]

    def e_step(self, costs, scalings=None) -> tuple[TreeModel, SbpSolution]:
        model = build_hmm_tree(self.T, self.S, self.observations, self.emission_cost, costs)
        return model, solve(model, self.sbp_config, init_scalings=scalings)

    def m_step(self, t: int, flow, mu_t, mu_t1, cost, beta):
        config = self.config
        # observed marginals differ from the flow's own
        strict = self.targets is None
        if config.variant == "istc":
            sym = SymCostConfig(config.eps, tol=config.sym_tol, max_iters=config.sym_max_iters)
            state = fit_cost_symmetric(flow, mu_t, mu_t1, sym, init_cost=cost, strict=strict)
            return state.cost, None

        model = BasisCostModel(self.basis.bases, beta, gamma=config.gamma, exponents=self.basis.exponents)
        state = fit_cost_basis(flow, mu_t, mu_t1, model, config.eps, tol=config.ista_tol,
                               max_iters=config.ista_max_iters, single_pass=config.single_pass, strict=strict)
        logger.debug(f"M-step interval {t}: beta={np.round(state.beta, 6).tolist()}")
        return state.cost, state.beta

    def run(self) -> EmResult:
        config = self.config
        costs = initial_costs(self.state_space, config, self.T)
        betas = None
        if self.basis is not None:
            betas = [self.basis.project(c) for c in costs]
            costs = [self.basis.cost(b) for b in betas]

        logger.info(f"EM start: variant={config.variant}, S={self.S}, T={self.T}, eps={config.eps:g}")
        trace = []
        scalings = None
        best = np.inf
        stagnant = 0
        converged = False
        iteration = 0

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for iteration in range(1, config.outer_iters + 1):
                try:
                    model, solution = self.e_step(costs, scalings)
                except PopflowError as e:
                    raise _tag_iteration(e, iteration, "E-step")
                scalings = solution.scalings
                flows, marginals = self._hidden(model, solution)
                if self.targets is not None:
                    marginals = self.targets

                args = [(t, flows[t], marginals[t], marginals[t + 1], costs[t],
                         None if betas is None else betas[t]) for t in range(self.T - 1)]
                try:
                    updates = list(pool.map(lambda a: self.m_step(*a), args))
                except PopflowError as e:
                    raise _tag_iteration(e, iteration, "M-step")

                new_costs = [c for c, _ in updates]
                residual = max(float(np.abs(n - o).max()) for n, o in zip(new_costs, costs))
                energy = free_energy(model, solution, config.eps)
                trace.append({
                    "iteration": iteration,
                    "residual": residual,
                    "free_energy": energy,
                    "sweeps": solution.sweeps_used,
                    "sbp_residual": solution.final_residual,
                })
                logger.info(f"EM iteration {iteration}: cost change {residual:.3e}, "
                            f"free energy {energy:.6f}, {solution.sweeps_used} sweeps")

                costs = new_costs
                if betas is not None:
                    betas = [b for _, b in updates]

                if residual <= config.outer_tol:
                    converged = True
                    break
                if residual >= best:
                    stagnant += 1
                    if stagnant >= config.stagnation_patience:
                        raise StagnationError(
                            f"EM iteration {iteration}: cost change has not decreased for {stagnant} iterations",
                            residual=residual, iterations=iteration, iteration=iteration,
                        )
                else:
                    best = residual
                    stagnant = 0

        if not converged:
            logger.warning(f"EM stopped after {config.outer_iters} iterations without reaching "
                           f"outer_tol={config.outer_tol:g}")

        try:
            model, solution = self.e_step(costs, scalings)
        except PopflowError as e:
            raise _tag_iteration(e, iteration, "final E-step")
        flows, marginals = self._hidden(model, solution)

        return EmResult(
            flows=flows,
            marginals=marginals,
            costs=costs,
            transition_matrices=transition_matrices(costs, config.eps),
            trace=trace,
            iterations=iteration,
            converged=converged,
            betas=betas,
            solution=solution,
            model=model,
        )

    def _hidden(self, model: TreeModel, solution: SbpSolution):
        flows = [solution.edge_flows[e] for e in model.hmm.transition_edges]
        marginals = [solution.node_marginals[t] for t in model.hmm.hidden_nodes]
        return flows, marginals


def run_em(observations: ObservationSet, state_space: StateSpace, emission_cost, config: EmConfig) -> EmResult:
    return EmRunner(observations, state_space, emission_cost, config).run()

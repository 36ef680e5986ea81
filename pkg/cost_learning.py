# cost_learning.py
"""
M-step: inverse optimal transport on a single transition edge.

Given an estimated flow M between two marginals, recover a cost C whose
entropic OT plan reproduces M. Two cost models are supported:

- symmetric, zero-diagonal matrices, learned by proximal iterative scaling;
- sparse combinations C = sum_q beta_q D^q of distance bases, learned by ISTA
  on the dual objective with an l1 penalty.

All Sinkhorn work here runs in the log domain on the duals alpha = eps * log u.
"""

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from constants import C_MAX_FACTOR, DEFAULT_EXPONENTS
from errors import ConvergenceError, DomainError
from mot_core import as_matrix, as_vector, eps_value, safe_log
from tree_model import StateSpace

logger = logging.getLogger(__name__)

MARGINAL_TOL = 1e-6
INNER_TOL = 1e-10


@dataclass(frozen=True)
class SymCostConfig:
    eps: float
    tol: float = 1e-8
    max_iters: int = 5000
    c_max_factor: float = C_MAX_FACTOR

    def __post_init__(self):
        object.__setattr__(self, "eps", eps_value(self.eps))
        if not self.tol > 0:
            raise DomainError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise DomainError(f"max_iters must be >= 1, got {self.max_iters}")

    @property
    def c_max(self) -> float:
        return self.c_max_factor * self.eps


@dataclass
class ImotState:
    """Result of one inverse-OT fit."""
    cost: np.ndarray
    plan: np.ndarray
    alpha_t: np.ndarray
    alpha_t1: np.ndarray
    residual: float  # l1 distance between the entropic plan of `cost` and the flow
    iterations: int
    clamped: int = 0
    beta: np.ndarray | None = None
    objective_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)


@dataclass
class HomogeneousFit:
    cost: np.ndarray
    plans: list
    residuals: list  # per interval
    iterations: int
    converged: bool
    clamped: int = 0


@dataclass
class BasisCostModel:
    """Cost model C = sum_q beta_q D^q over symmetric zero-diagonal bases."""
    bases: tuple
    beta: np.ndarray
    gamma: float = 1e-3
    rho: float | None = None  # None: default_rho()
    exponents: tuple | None = None

    def __post_init__(self):
        bases = tuple(as_matrix(b, "basis") for b in self.bases)
        if not bases:
            raise DomainError("at least one basis matrix is required")
        for q, b in enumerate(bases):
            if b.shape[0] != b.shape[1] or b.shape != bases[0].shape:
                raise DomainError(f"basis {q} has shape {b.shape}")
            if not np.allclose(b, b.T) or np.any(np.diag(b) != 0):
                raise DomainError(f"basis {q} must be symmetric with zero diagonal")
        self.bases = bases
        self.beta = np.asarray(self.beta, dtype=float).copy()
        if self.beta.shape != (len(bases),):
            raise DomainError(f"beta has shape {self.beta.shape}, expected {(len(bases),)}")
        if not np.all(np.isfinite(self.beta)):
            raise DomainError("beta must be finite")
        if self.gamma < 0:
            raise DomainError(f"gamma must be nonnegative, got {self.gamma}")

    @classmethod
    def from_state_space(cls, space: StateSpace, exponents: Sequence = DEFAULT_EXPONENTS,
                         gamma: float = 1e-3, beta=None, rho: float | None = None) -> "BasisCostModel":
        """D^q_ij = |x_i - x_j| ** q over the state coordinates."""
        dist = space.distance_matrix()
        bases = tuple(dist ** q for q in exponents)
        beta = np.zeros(len(bases)) if beta is None else beta
        return cls(bases, beta, gamma=gamma, rho=rho, exponents=tuple(exponents))

    @property
    def Q(self) -> int:
        return len(self.bases)

    def cost(self, beta=None) -> np.ndarray:
        beta = self.beta if beta is None else np.asarray(beta, dtype=float)
        return np.tensordot(beta, np.stack(self.bases), axes=1)

    def default_rho(self) -> float:
        """1 / (Q * max_q |D^q|_F^2), the first ISTA step."""
        largest = max(float((b ** 2).sum()) for b in self.bases)
        return 1.0 / (self.Q * largest) if largest > 0 else 1.0

    def project(self, cost) -> np.ndarray:
        """Least-squares coefficients of a cost matrix in the basis span."""
        design = np.stack([b.ravel() for b in self.bases], axis=1)
        beta, *_ = np.linalg.lstsq(design, np.asarray(cost, dtype=float).ravel(), rcond=None)
        return beta


def sym_prox(C_hat) -> np.ndarray:
    """Frobenius projection onto symmetric zero-diagonal matrices."""
    C_hat = np.asarray(C_hat, dtype=float)
    if C_hat.ndim != 2 or C_hat.shape[0] != C_hat.shape[1]:
        raise DomainError(f"sym_prox needs a square matrix, got shape {C_hat.shape}")
    C = 0.5 * (C_hat + C_hat.T)
    np.fill_diagonal(C, 0.0)
    return C


def soft_threshold(x, threshold):
    """sign(x) * max(|x| - threshold, 0), element-wise."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def _check_flow(flow, mu_t, mu_t1, strict: bool = True):
    """
    Validate a flow and its two marginals. Zero marginal entries are allowed;
    strict also requires the flow's row/column sums to equal the marginals.
    """
    flow = as_matrix(flow, "flow")
    mu_t = as_vector(mu_t, "mu_t")
    mu_t1 = as_vector(mu_t1, "mu_t1")
    if flow.shape != (mu_t.shape[0], mu_t1.shape[0]):
        raise DomainError(f"flow shape {flow.shape} does not match marginals {mu_t.shape[0]}x{mu_t1.shape[0]}")
    if np.any(flow < 0):
        raise DomainError("flow has negative entries")
    if abs(flow.sum() - 1.0) > MARGINAL_TOL:
        raise DomainError(f"flow must have mass 1, got {flow.sum()!r}")
    for name, mu in (("mu_t", mu_t), ("mu_t1", mu_t1)):
        if abs(mu.sum() - 1.0) > MARGINAL_TOL:
            raise DomainError(f"{name} must have mass 1, got {mu.sum()!r}")
    if strict and (np.abs(flow.sum(axis=1) - mu_t).max() > MARGINAL_TOL
                   or np.abs(flow.sum(axis=0) - mu_t1).max() > MARGINAL_TOL):
        raise DomainError("flow row/column sums do not match the marginals")
    return flow, mu_t, mu_t1


def _pairing(alpha, mu) -> float:
    """<alpha, mu> over the support of mu; duals are -inf where mu vanishes."""
    mu = np.asarray(mu, dtype=float)
    support = mu > 0
    return float(np.asarray(alpha, dtype=float)[support] @ mu[support])


def _log_plan(C, alpha_t, alpha_t1, eps) -> np.ndarray:
    return (alpha_t[:, None] + alpha_t1[None, :] - C) / eps


def entropic_ot(C, mu, nu, eps, tol: float = INNER_TOL, max_iters: int = 100_000,
                alpha_t1=None, single_pass: bool = False):
    """
    Bi-marginal entropic OT by log-domain Sinkhorn on the duals.

    Returns (plan, alpha_t, alpha_t1) with plan_ij = exp((alpha_t_i + alpha_t1_j - C_ij) / eps).
    alpha_t1 warm-starts the iteration; single_pass runs exactly one scaling pass.
    """
    eps = eps_value(eps)
    C = as_matrix(C, "cost")
    log_mu = safe_log(as_vector(mu, "mu"))
    log_nu = safe_log(as_vector(nu, "nu"))
    b = np.zeros(C.shape[1]) if alpha_t1 is None else np.asarray(alpha_t1, dtype=float).copy()
    logK = -C / eps

    residual = np.inf
    for it in range(1, max_iters + 1):
        a = eps * (log_mu - logsumexp(logK + b[None, :] / eps, axis=1))
        b = eps * (log_nu - logsumexp(logK + a[:, None] / eps, axis=0))
        plan = np.exp(_log_plan(C, a, b, eps))
        residual = float(np.abs(plan.sum(axis=1) - np.exp(log_mu)).sum())
        if single_pass or residual <= tol:
            return plan, a, b
    raise ConvergenceError(f"entropic OT did not converge (residual {residual:.3e})",
                           residual=residual, iterations=max_iters)


def imot_objective(C, alpha_t, alpha_t1, flow, mu_t, mu_t1, eps) -> float:
    """
    F = <flow, C> - <alpha_t, mu_t> - <alpha_t1, mu_t1>
        + eps * sum_ij exp((alpha_t_i + alpha_t1_j - C_ij) / eps)
    """
    eps = eps_value(eps)
    C = np.asarray(C, dtype=float)
    alpha_t = np.asarray(alpha_t, dtype=float)
    alpha_t1 = np.asarray(alpha_t1, dtype=float)
    exp_term = float(np.exp(logsumexp(_log_plan(C, alpha_t, alpha_t1, eps))))
    return (float((np.asarray(flow) * C).sum())
            - _pairing(alpha_t, mu_t)
            - _pairing(alpha_t1, mu_t1)
            + eps * exp_term)


def imot_gradient(C, alpha_t, alpha_t1, flow, mu_t, mu_t1, eps):
    """Partial derivatives (dF/dalpha_t, dF/dalpha_t1, dF/dC)."""
    eps = eps_value(eps)
    plan = np.exp(_log_plan(np.asarray(C, dtype=float), np.asarray(alpha_t, dtype=float),
                            np.asarray(alpha_t1, dtype=float), eps))
    return (plan.sum(axis=1) - np.asarray(mu_t),
            plan.sum(axis=0) - np.asarray(mu_t1),
            np.asarray(flow) - plan)


def basis_gradient(beta, bases, alpha_t, alpha_t1, flow, eps) -> np.ndarray:
    """dF/dbeta_k = sum_ij D^k_ij (flow_ij - plan_ij) through C = sum_q beta_q D^q."""
    stacked = np.stack([np.asarray(b, dtype=float) for b in bases])
    C = np.tensordot(np.asarray(beta, dtype=float), stacked, axes=1)
    _, _, d_cost = imot_gradient(C, alpha_t, alpha_t1, flow, np.zeros(C.shape[0]), np.zeros(C.shape[1]), eps)
    return np.tensordot(stacked, d_cost, axes=([1, 2], [0, 1]))


def align_gauge(C, reference) -> np.ndarray:
    """
    Add the row/column offsets f_i + g_j that bring C closest to reference
    in Frobenius norm. Entropic plans do not see these offsets.
    """
    C = as_matrix(C, "cost")
    R = as_matrix(reference, "reference") - C
    offsets = R.mean(axis=1, keepdims=True) + R.mean(axis=0, keepdims=True) - R.mean()
    return C + offsets


def _clamp(raw: np.ndarray, c_max: float) -> tuple[np.ndarray, int]:
    """Clip raw costs into [-c_max, c_max]; NaN goes to c_max."""
    mask = ~(np.abs(raw) <= c_max)
    count = int(mask.sum())
    if count:
        raw = np.clip(np.where(np.isnan(raw), c_max, raw), -c_max, c_max)
    return raw, count


def _support_prox(raw: np.ndarray, known: np.ndarray, c_max: float) -> np.ndarray:
    """
    sym_prox restricted to the entries the marginals determine. A pair seen in
    one direction only takes that value; a pair seen in neither sits at c_max.
    """
    with np.errstate(invalid="ignore"):
        mean = 0.5 * (raw + raw.T)
    C = np.where(known & known.T, mean,
                 np.where(known, raw, np.where(known.T, raw.T, c_max)))
    np.fill_diagonal(C, 0.0)
    return C


def fit_cost_symmetric(flow, mu_t, mu_t1, config: SymCostConfig, init_cost=None,
                       strict: bool = True) -> ImotState:
    """
    Iterative scaling for a symmetric zero-diagonal cost:

        Sigma <- exp(-C/eps); u_t, u_t1 <- one Sinkhorn pass;
        Sigma <- M / (u_t u_t1^T); C <- prox(-eps log Sigma)

    until the scaled plan reproduces the flow within config.tol in l1.
    Zero flow entries give infinite raw costs, clamped at c_max with a warning.
    Entries between states outside the marginals' supports are left at c_max.

    With strict=False the flow may come from other marginals than (mu_t, mu_t1),
    as in the EM M-step. The plan can then not reproduce it; the loop stops once
    the cost moves by at most config.tol, and running out of iterations only
    logs a warning.
    """
    flow, mu_t, mu_t1 = _check_flow(flow, mu_t, mu_t1, strict)
    eps = config.eps
    S = flow.shape[0]
    if flow.shape[1] != S:
        raise DomainError("symmetric costs need a square flow")

    known = (mu_t > 0)[:, None] & (mu_t1 > 0)[None, :]
    C = np.zeros((S, S)) if init_cost is None else sym_prox(as_matrix(init_cost, "init_cost"))
    _, a, b = entropic_ot(C, mu_t, mu_t1, eps)
    log_mu_t, log_mu_t1, log_flow = safe_log(mu_t), safe_log(mu_t1), safe_log(flow)

    trace = []
    clamped = 0
    residual = change = np.inf
    converged = False
    for it in range(1, config.max_iters + 1):
        logK = -C / eps
        a = eps * (log_mu_t - logsumexp(logK + b[None, :] / eps, axis=1))
        b = eps * (log_mu_t1 - logsumexp(logK + a[:, None] / eps, axis=0))

        with np.errstate(invalid="ignore"):
            raw = np.where(known, a[:, None] + b[None, :] - eps * log_flow, 0.0)
        raw, clamped = _clamp(raw, config.c_max)
        C_new = _support_prox(raw, known, config.c_max)
        change = float(np.abs(C_new - C).max())
        C = C_new

        plan = np.exp(_log_plan(C, a, b, eps))
        residual = float(np.abs(plan - flow).sum())
        trace.append(residual)
        logger.debug(f"Symmetric IMOT iteration {it}: residual {residual:.3e}, cost change {change:.3e}")
        if residual <= config.tol or (not strict and change <= config.tol):
            converged = True
            break

    if not converged:
        if strict:
            raise ConvergenceError(f"symmetric cost learning did not converge (residual {residual:.3e})",
                                   residual=residual, iterations=config.max_iters, clamped=clamped)
        logger.warning(f"Symmetric cost fit stopped after {config.max_iters} iterations (change {change:.3e})")

    if clamped:
        logger.warning(f"Clamped {clamped} cost entries at |C| = C_max = {config.c_max:g}")

    plan, a, b = entropic_ot(C, mu_t, mu_t1, eps, alpha_t1=b)
    return ImotState(
        cost=C,
        plan=plan,
        alpha_t=a,
        alpha_t1=b,
        residual=float(np.abs(plan - flow).sum()),
        iterations=it,
        clamped=clamped,
        residual_trace=trace,
    )


def learn_cost_symmetric(flow, mu_t, mu_t1, config: SymCostConfig, init_cost=None) -> np.ndarray:
    return fit_cost_symmetric(flow, mu_t, mu_t1, config, init_cost=init_cost).cost


# backtracking gives up below this step and accepts the candidate
RHO_FLOOR = 1e-30
# relative change of G below which ISTA stops even while beta still drifts
OBJECTIVE_RTOL = 1e-13


def fit_cost_basis(flow, mu_t, mu_t1, model: BasisCostModel, eps, tol: float = 1e-8,
                   max_iters: int = 20_000, single_pass: bool = False, inner_tol: float = INNER_TOL,
                   strict: bool = True) -> ImotState:
    """
    ISTA on G(beta) = F(alpha*(beta), beta) + gamma * |beta|_1.

    Each step solves the inner Sinkhorn problem (exactly, or with one pass when
    single_pass is set) and takes beta <- soft_threshold(beta - rho * grad, rho * gamma).
    The first step tries model.rho (or 1 / (Q max_q |D^q|_F^2)), later steps the
    Barzilai-Borwein ratio |s|^2 / <s, y> of the previous step. rho is halved until
    the smooth part passes the sufficient-decrease test, whose slack is tied to
    inner_tol, so G never increases beyond the inner solver's accuracy.
    Stops when |beta_new - beta_old|_inf <= tol * max(1, |beta|_inf), or when G
    changes by at most OBJECTIVE_RTOL of its size; the latter ends the slow
    drift along nearly collinear bases, which leaves the plan unchanged.

    strict has the meaning of fit_cost_symmetric.
    """
    flow, mu_t, mu_t1 = _check_flow(flow, mu_t, mu_t1, strict)
    eps = eps_value(eps)
    rho = model.rho if model.rho is not None else model.default_rho()
    gamma = model.gamma

    def evaluate(beta, warm):
        C = model.cost(beta)
        plan, a, b = entropic_ot(C, mu_t, mu_t1, eps, tol=inner_tol, alpha_t1=warm, single_pass=single_pass)
        return C, plan, a, b, imot_objective(C, a, b, flow, mu_t, mu_t1, eps)

    beta = model.beta.copy()
    C, plan, a, b, smooth = evaluate(beta, None)
    grad = basis_gradient(beta, model.bases, a, b, flow, eps)
    objectives = [smooth + gamma * float(np.abs(beta).sum())]
    residuals = [float(np.abs(plan - flow).sum())]

    converged = False
    for it in range(1, max_iters + 1):
        slack = 1e-2 * inner_tol * max(1.0, abs(smooth))
        while True:
            candidate = soft_threshold(beta - rho * grad, rho * gamma)
            delta = candidate - beta
            bound = smooth + float(grad @ delta) + float(delta @ delta) / (2.0 * rho)
            try:
                trial = evaluate(candidate, b)
            except ConvergenceError:
                # a step this long drives the inner solve out of reach
                trial = None
            if trial is not None and (trial[-1] <= bound + slack or rho < RHO_FLOOR):
                break
            if rho < RHO_FLOOR:
                raise ConvergenceError("ISTA step size collapsed", residual=residuals[-1], iterations=it)
            rho *= 0.5
            logger.debug(f"ISTA step rejected, rho halved to {rho:.3e}")

        C, plan, a, b, smooth = trial
        new_grad = basis_gradient(candidate, model.bases, a, b, flow, eps)
        step = float(np.abs(delta).max())
        s, y = delta, new_grad - grad
        beta, grad = candidate, new_grad
        objectives.append(smooth + gamma * float(np.abs(beta).sum()))
        residuals.append(float(np.abs(plan - flow).sum()))
        settled = abs(objectives[-2] - objectives[-1]) <= OBJECTIVE_RTOL * max(1.0, abs(objectives[-1]))
        if step <= tol * max(1.0, float(np.abs(beta).max())) or settled:
            converged = True
            break
        curvature = float(s @ y)
        if curvature > 0:
            rho = float(s @ s) / curvature

    if not converged:
        if strict:
            raise ConvergenceError(f"ISTA did not converge in {max_iters} iterations",
                                   residual=residuals[-1], iterations=max_iters)
        logger.warning(f"ISTA stopped after {max_iters} iterations (step {step:.3e})")

    logger.debug(f"ISTA finished in {it} iterations: beta={np.round(beta, 6).tolist()}, "
                 f"residual {residuals[-1]:.3e}")
    plan, a, b = entropic_ot(C, mu_t, mu_t1, eps, tol=inner_tol, alpha_t1=b)
    return ImotState(
        cost=C,
        plan=plan,
        alpha_t=a,
        alpha_t1=b,
        residual=float(np.abs(plan - flow).sum()),
        iterations=it,
        beta=beta,
        objective_trace=objectives,
        residual_trace=residuals,
    )


def learn_cost_basis(flow, mu_t, mu_t1, model: BasisCostModel, eps, **kwargs):
    """Returns (beta, C)."""
    state = fit_cost_basis(flow, mu_t, mu_t1, model, eps, **kwargs)
    return state.beta, state.cost


def learn_cost_homogeneous(flows: Sequence, marginals: Sequence, config: SymCostConfig,
                           init_cost=None) -> HomogeneousFit:
    """
    One symmetric zero-diagonal cost shared by every interval: iterative scaling
    pooled over intervals, Sigma <- sum_t M^t / sum_t u_t u_t1^T. Stops when the
    cost changes by at most config.tol.

    marginals: per interval, the pair (mu_t, mu_t1).
    """
    if len(flows) != len(marginals) or not flows:
        raise DomainError("need one (mu_t, mu_t1) pair per flow")
    checked = [_check_flow(f, m0, m1) for f, (m0, m1) in zip(flows, marginals)]
    eps = config.eps
    S = checked[0][0].shape[0]
    C = np.zeros((S, S)) if init_cost is None else sym_prox(init_cost)
    duals = [entropic_ot(C, m0, m1, eps)[2] for _, m0, m1 in checked]
    pooled_flow = np.sum([f for f, _, _ in checked], axis=0)
    log_pooled = safe_log(pooled_flow)

    converged = False
    clamped = 0
    for it in range(1, config.max_iters + 1):
        logK = -C / eps
        log_scales = []
        for k, (_, m0, m1) in enumerate(checked):
            a = eps * (safe_log(m0) - logsumexp(logK + duals[k][None, :] / eps, axis=1))
            b = eps * (safe_log(m1) - logsumexp(logK + a[:, None] / eps, axis=0))
            duals[k] = b
            log_scales.append((a[:, None] + b[None, :]) / eps)
        log_denominator = logsumexp(np.stack(log_scales), axis=0)

        with np.errstate(invalid="ignore"):
            raw = -eps * (log_pooled - log_denominator)
        raw, clamped = _clamp(raw, config.c_max)
        C_new = sym_prox(raw)
        change = float(np.abs(C_new - C).max())
        C = C_new
        if change <= config.tol:
            converged = True
            break

    if not converged:
        logger.warning(f"Homogeneous cost fit stopped after {config.max_iters} iterations (change {change:.3e})")
    if clamped:
        logger.warning(f"Clamped {clamped} cost entries at |C| = C_max = {config.c_max:g}")

    plans, residuals = [], []
    for f, m0, m1 in checked:
        plan, _, _ = entropic_ot(C, m0, m1, eps)
        plans.append(plan)
        residuals.append(float(np.abs(plan - f).sum()))
    return HomogeneousFit(cost=C, plans=plans, residuals=residuals, iterations=it,
                          converged=converged, clamped=clamped)

"""Forward--backward splitting with safeguarded deviation vectors.

One iteration, with ``c = (1 - lam) gamma beta / (2 - lam gamma beta)``::

    y = x + u
    z = x + c u + v
    p = (M + gamma A)^-1 (M z - gamma C y)
    x_next = x + lam (p - z)

after which the next deviations ``(u, v)`` are chosen by a policy and
clipped to the budget ``w_u |u|_M^2 + w_v |v|_M^2 <= zeta_n ell_n^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .metric import IdentityMetric, Metric
from .operators import CocoerciveOperator, ResolventOperator, zero_operator
from .schedules import Schedules
from .trace import IterationTrace


class SolverAbort(FloatingPointError):
    """Non-finite values appeared; ``trace`` holds everything up to the last good state."""

    def __init__(self, message: str, trace: IterationTrace | None = None):
        super().__init__(message)
        self.trace = trace


# -- scalar coefficients ---------------------------------------------------

def budget_weights(gamma: float, lam: float, beta: float) -> tuple[float, float]:
    """Coefficients of ``|u|_M^2`` and ``|v|_M^2`` in the norm condition."""
    lgb = lam * gamma * beta
    return lgb / (2.0 - lgb), lam * (2.0 - lgb) / (4.0 - 2.0 * lam - gamma * beta)


def ell_sq(x, p, u, v, gamma: float, lam: float, beta: float, metric: Metric) -> float:
    """Online-computable budget quantity ``ell_n^2`` (nonnegative)."""
    gb = gamma * beta
    lgb = lam * gb
    denom = 4.0 - 2.0 * lam - gb
    r = p - x + (lgb / (2.0 - lgb)) * u - (2.0 * (1.0 - lam) / denom) * v
    return max(lam * denom / 2.0 * metric.norm_sq(r), 0.0)


def residual_bound(x, p, u, v, gamma: float, lam: float, beta: float, metric: Metric) -> float:
    """Upper bound on ``|Delta_n|_{M^-1}`` where ``Delta_n`` lies in ``(A + C) p_n``.

    Needs no extra evaluation of ``C``.
    """
    gb = gamma * beta
    lgb = lam * gb
    first = (2.0 - gb) * (x - p) - (lgb * (2.0 - gb) / (2.0 - lgb)) * u + 2.0 * v
    out = metric.norm(first) / (2.0 * gamma)
    if beta > 0:
        out += beta / 2.0 * metric.norm(x - p + u)
    return out


@dataclass(frozen=True)
class DeviationBudget:
    weight_u: float
    weight_v: float
    rhs: float
    metric: Metric = field(default_factory=IdentityMetric, compare=False)

    def lhs(self, u, v) -> float:
        out = 0.0
        if self.weight_u:
            out += self.weight_u * self.metric.norm_sq(u)
        if self.weight_v:
            out += self.weight_v * self.metric.norm_sq(v)
        return out


def deviation_budget(gamma_next: float, lambda_next: float, beta: float, zeta_n: float, ell_sq_n: float,
                     metric: Metric | None = None) -> DeviationBudget:
    wu, wv = budget_weights(gamma_next, lambda_next, beta)
    return DeviationBudget(wu, wv, zeta_n * ell_sq_n, metric if metric is not None else IdentityMetric())


def enforce_budget(u, v, budget: DeviationBudget) -> tuple[np.ndarray, np.ndarray, float]:
    """Scale ``(u, v)`` by one common factor so that the budget holds.

    Returns the (possibly) rescaled pair and the factor applied. With a zero
    ``u`` weight (``beta = 0``) ``u`` plays no role and is set to zero.
    """
    if budget.weight_u == 0.0:
        u = np.zeros_like(u)
    lhs = budget.lhs(u, v)
    if lhs <= budget.rhs:
        return u, v, 1.0
    scale = float(np.sqrt(budget.rhs / lhs)) if budget.rhs > 0 else 0.0
    return scale * u, scale * v, scale


# -- problem, state, policy ------------------------------------------------

@dataclass(frozen=True)
class FbProblem:
    """``0 in A x + C x`` under metric ``M``.

    With the identity metric, ``A`` is given by its resolvent. For any other
    metric pass ``backward(gamma, z, Cy) = (M + gamma A)^-1 (M z - gamma Cy)``.
    """

    A: ResolventOperator | None
    C: CocoerciveOperator = field(default_factory=zero_operator)
    metric: Metric = field(default_factory=IdentityMetric)
    backward: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None

    @property
    def beta(self) -> float:
        return float(self.C.beta)

    def backward_step(self, gamma, z, Cy):
        if self.backward is not None:
            return self.backward(gamma, z, Cy)
        if not isinstance(self.metric, IdentityMetric):
            raise TypeError("a non-identity metric needs an explicit backward step")
        return self.A.resolve(gamma, z - gamma * Cy)


@dataclass
class StepInfo:
    """Quantities of the iteration that produced the current state."""

    n: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    p: np.ndarray
    u: np.ndarray
    v: np.ndarray
    Cy: np.ndarray
    gamma: float
    lam: float
    zeta: float
    ell_sq: float
    residual: float
    weight_u: float
    weight_v: float
    budget: DeviationBudget | None = None
    scale: float = 1.0


@dataclass
class FbState:
    n: int
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    ell_sq_prev: float = 0.0
    p_prev: np.ndarray | None = None
    gamma_prev: float | None = None
    lambda_prev: float | None = None
    last: StepInfo | None = None

    @classmethod
    def initial(cls, x0) -> "FbState":
        x0 = np.array(x0, dtype=float).reshape(-1)
        return cls(0, x0, np.zeros_like(x0), np.zeros_like(x0))


class DeviationPolicy(Protocol):
    def propose(self, state: FbState, budget: DeviationBudget) -> tuple[np.ndarray, np.ndarray]:
        ...


# -- iteration -------------------------------------------------------------

def _check_finite(*arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            return False
    return True


def advance(state: FbState, problem: FbProblem, s: Schedules) -> FbState:
    """Forward--backward update of ``x``; deviations for the next step not yet chosen."""
    n, x, u, v = state.n, state.x, state.u, state.v
    gamma, lam, beta = s.gamma(n), s.lam(n), problem.beta
    lgb = lam * gamma * beta
    y = x + u
    z = x + ((1.0 - lam) * gamma * beta / (2.0 - lgb)) * u + v
    Cy = np.zeros_like(x) if problem.C.is_zero else problem.C(y)
    p = problem.backward_step(gamma, z, Cy)
    x_next = x + lam * (p - z)
    # a non-finite p always propagates into x_next, so one check covers both
    if not _check_finite(x_next):
        raise SolverAbort(f"non-finite iterate at n={n}")
    M = problem.metric
    l2 = ell_sq(x, p, u, v, gamma, lam, beta, M)
    res = residual_bound(x, p, u, v, gamma, lam, beta, M)
    wu, wv = budget_weights(gamma, lam, beta)
    info = StepInfo(n=n, x=x, y=y, z=z, p=p, u=u, v=v, Cy=Cy, gamma=gamma, lam=lam, zeta=s.zeta(n),
                    ell_sq=l2, residual=res, weight_u=wu, weight_v=wv)
    return FbState(n + 1, x_next, u, v, ell_sq_prev=l2, p_prev=p, gamma_prev=gamma, lambda_prev=lam, last=info)


def _with_deviations(state: FbState, u, v) -> FbState:
    return FbState(state.n, state.x, u, v, state.ell_sq_prev, state.p_prev, state.gamma_prev, state.lambda_prev,
                   state.last)


def deviate(state: FbState, problem: FbProblem, s: Schedules, policy: DeviationPolicy | None) -> FbState:
    """Pick ``(u_{n+1}, v_{n+1})`` with the policy and clip them to the budget."""
    info = state.last
    budget = deviation_budget(s.gamma(state.n), s.lam(state.n), problem.beta, info.zeta, info.ell_sq,
                              problem.metric)
    info.budget = budget
    if policy is None or budget.rhs == 0.0:
        zero = np.zeros_like(state.x)
        return _with_deviations(state, zero, zero.copy())
    u, v = policy.propose(state, budget)
    u, v, scale = enforce_budget(np.asarray(u, float), np.asarray(v, float), budget)
    if not _check_finite(u, v):
        raise SolverAbort(f"policy proposed non-finite deviations at n={state.n}")
    info.scale = scale
    return _with_deviations(state, u, v)


def fb_step(state: FbState, problem: FbProblem, s: Schedules, policy: DeviationPolicy | None = None) -> FbState:
    """One full iteration: update ``x`` and choose the next deviations."""
    return deviate(advance(state, problem, s), problem, s, policy)


def solve(problem: FbProblem, s: Schedules, x0, policy: DeviationPolicy | None = None, max_iter: int = 10000,
          residual_tol: float = 0.0, reference=None, keep_iterates: bool = False,
          record_delta: bool = False) -> IterationTrace:
    """Run the iteration until the residual bound drops to ``residual_tol``.

    The residual is tested right after the ``x`` update, before the policy
    is consulted. With ``record_delta`` (identity metric only) the exact
    ``|Delta_n|`` is also recorded, at the price of one extra ``C`` call.
    """
    M = problem.metric
    state = FbState.initial(x0)
    trace = IterationTrace(kind="fb", beta=problem.beta, metric=M, reference=reference,
                           keep_iterates=keep_iterates)
    trace.start(state.x)
    for _ in range(max_iter):
        try:
            state = advance(state, problem, s)
        except SolverAbort as exc:
            exc.trace = trace.finish("aborted")
            raise
        info = state.last
        delta = None
        if record_delta:
            Cp = np.zeros_like(info.p) if problem.C.is_zero else problem.C(info.p)
            delta = float(np.linalg.norm((info.z - info.p) / info.gamma - (info.Cy - Cp)))
        trace.record(info, state.x, delta=delta)
        if info.residual <= residual_tol:
            return trace.finish("converged")
        try:
            state = deviate(state, problem, s, policy)
        except SolverAbort as exc:
            exc.trace = trace.finish("aborted")
            raise
    return trace.finish("max_iter")

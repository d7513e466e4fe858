"""Primal--dual splitting with deviations and the inertial primal--dual method.

Solves ``0 in A x + L* B(L x) + C x`` through the pair ``w = (x, mu)``,
stored flat as ``concatenate([x, mu])``. The preconditioned resolvent of the
stacked operator factors into a primal resolvent of ``A`` followed by a dual
resolvent of ``B^-1``, so the block metric is never assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fb import (FbState, SolverAbort, StepInfo, budget_weights, deviate, deviation_budget, ell_sq,
                 residual_bound, DeviationBudget)
from .metric import PrimalDualMetric
from .operators import CocoerciveOperator, LinearMap, ResolventOperator, resolvent_conjugate, zero_operator
from .schedules import ConstantSequence, Schedules
from .trace import IterationTrace


@dataclass(frozen=True)
class PdProblem:
    """Operators and step sizes of a primal--dual problem.

    ``f_prox(v, t)`` returns ``prox_{t f}(v)`` where ``B = df``. ``C`` is
    cocoercive in the Euclidean norm with constant ``C.beta``; in the block
    metric its constant grows to ``beta / (1 - sigma tau |L|^2)``, which is
    what the iteration uses (:attr:`beta`).
    """

    A: ResolventOperator
    f_prox: Callable[[np.ndarray, float], np.ndarray]
    L: LinearMap
    tau: float
    sigma: float
    C: CocoerciveOperator = field(default_factory=zero_operator)
    norm_L: float | None = None
    metric: PrimalDualMetric = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "metric", PrimalDualMetric(self.tau, self.sigma, self.L, norm_L=self.norm_L))

    @property
    def n_primal(self) -> int:
        return self.L.in_dim

    @property
    def beta(self) -> float:
        if self.C.beta == 0:
            return 0.0
        return float(self.C.beta) / (1.0 - self.metric.contraction)

    def split(self, w):
        k = self.n_primal
        return w[:k], w[k:]

    def dual_resolvent(self, y):
        return resolvent_conjugate(self.f_prox, y, self.sigma)

    def schedules(self, s: Schedules) -> Schedules:
        """``s`` with the step size pinned to ``tau``."""
        return replace(s, gamma=ConstantSequence(self.tau))


def pd_budget(prob: PdProblem, lambda_next: float, zeta_n: float, ell_sq_n: float) -> DeviationBudget:
    """Budget for ``(u_x, v)``; ``|(u_x, 0)|_M`` equals the plain norm of ``u_x``."""
    return deviation_budget(prob.tau, lambda_next, prob.beta, zeta_n, ell_sq_n, prob.metric)


def pd_initial(x0, mu0) -> FbState:
    return FbState.initial(np.concatenate([np.asarray(x0, float).reshape(-1), np.asarray(mu0, float).reshape(-1)]))


def pd_advance(state: FbState, prob: PdProblem, s: Schedules) -> FbState:
    """Update ``w = (x, mu)`` with the factorized preconditioned resolvent.

    Only the primal block of ``u`` enters (``C`` acts on ``x`` alone). The
    ``M``-norms of the budget quantity and residual bound are evaluated
    blockwise; with zero deviations both come from the single vector ``p - w``.
    """
    n = state.n
    tau, sigma, beta = prob.tau, prob.sigma, prob.beta
    lam = s.lam(n)
    L = prob.L
    k = prob.n_primal
    w, u, v = state.x, state.u, state.v
    x, mu = w[:k], w[k:]
    ux = u[:k]
    has_u = beta > 0 and bool(ux.any())
    has_v = bool(v.any())
    lgb = lam * tau * beta
    x_t = x + ux if has_u else x
    x_h = x + ((1.0 - lam) * tau * beta / (2.0 - lgb)) * ux if has_u else x
    mu_h = mu
    if has_v:
        x_h = x_h + v[:k]
        mu_h = mu + v[k:]
    Cx_t = None if prob.C.is_zero else prob.C(x_t)
    arg = x_h - tau * L.adjoint_apply(mu_h)
    if Cx_t is not None:
        arg -= tau * Cx_t
    p_x = prob.A.resolve(tau, arg)
    p_mu = prob.dual_resolvent(mu_h + sigma * L.apply(2.0 * p_x - x_h))
    p = np.concatenate([p_x, p_mu])
    z = np.concatenate([x_h, mu_h]) if (has_u or has_v) else w
    w_next = w + lam * (p - z)

    ratio = tau / sigma

    def mnorm_sq(r):
        rx, rmu = r[:k], r[k:]
        return float(rx @ rx - 2.0 * tau * (L.apply(rx) @ rmu) + ratio * (rmu @ rmu))

    gb = tau * beta
    denom = 4.0 - 2.0 * lam - gb
    d = p - w
    if has_u or has_v:
        r = d + (lgb / (2.0 - lgb)) * u - (2.0 * (1.0 - lam) / denom) * v
        ell = lam * denom / 2.0 * mnorm_sq(r)
        first = -(2.0 - gb) * d - (lgb * (2.0 - gb) / (2.0 - lgb)) * u + 2.0 * v
        residual = np.sqrt(max(mnorm_sq(first), 0.0)) / (2.0 * tau)
        if beta > 0:
            residual += beta / 2.0 * np.sqrt(max(mnorm_sq(u - d), 0.0))
    else:
        dd = max(mnorm_sq(d), 0.0)
        ell = lam * denom / 2.0 * dd
        residual = (2.0 - gb) * np.sqrt(dd) / (2.0 * tau) + beta / 2.0 * np.sqrt(dd)
    if not (np.isfinite(ell) and np.isfinite(residual) and np.isfinite(w_next).all()):
        raise SolverAbort(f"non-finite iterate at n={n}")
    wu, wv = budget_weights(tau, lam, beta)
    Cy = np.zeros_like(w)
    if Cx_t is not None:
        Cy[:k] = Cx_t
    y = np.concatenate([x_t, mu]) if has_u else w
    info = StepInfo(n=n, x=w, y=y, z=z, p=p, u=u, v=v, Cy=Cy, gamma=tau, lam=lam, zeta=s.zeta(n),
                    ell_sq=max(float(ell), 0.0), residual=float(residual), weight_u=wu, weight_v=wv)
    return FbState(n + 1, w_next, u, v, ell_sq_prev=info.ell_sq, p_prev=p, gamma_prev=tau, lambda_prev=lam,
                   last=info)


class _DualFreeU:
    """Wraps a policy so that the dual block of ``u`` is always zero."""

    def __init__(self, policy, k):
        self.policy, self.k = policy, k

    def propose(self, state, budget):
        u, v = self.policy.propose(state, budget)
        u = np.array(u, dtype=float)
        u[self.k:] = 0.0
        return u, v


def pd_deviate(state: FbState, prob: PdProblem, s: Schedules, policy) -> FbState:
    if policy is None:
        info = state.last
        info.budget = pd_budget(prob, s.lam(state.n), info.zeta, info.ell_sq)
        zero = np.zeros_like(state.x)
        return replace(state, u=zero, v=zero)
    return deviate(state, prob, prob.schedules(s), _DualFreeU(policy, prob.n_primal))


def pd_step(state: FbState, prob: PdProblem, s: Schedules, policy=None) -> FbState:
    """One iteration of primal--dual splitting with deviations."""
    return pd_deviate(pd_advance(state, prob, s), prob, s, policy)


def pd_solve(prob: PdProblem, s: Schedules, x0, mu0, policy=None, max_iter: int = 10000,
             residual_tol: float = 0.0, reference=None, keep_iterates: bool = False) -> IterationTrace:
    """Driver for :func:`pd_step`; stops once the residual bound reaches ``residual_tol``."""
    state = pd_initial(x0, mu0)
    trace = IterationTrace(kind="pd", beta=prob.beta, metric=prob.metric, reference=reference,
                           keep_iterates=keep_iterates)
    trace.start(state.x)
    for _ in range(max_iter):
        try:
            state = pd_advance(state, prob, s)
        except SolverAbort as exc:
            exc.trace = trace.finish("aborted")
            raise
        trace.record(state.last, state.x)
        if state.last.residual <= residual_tol:
            return trace.finish("converged")
        state = pd_deviate(state, prob, s, policy)
    return trace.finish("max_iter")


# -- inertial primal--dual -------------------------------------------------

@dataclass
class InertialState:
    """State of the inertial method, with cached images under ``L`` and ``L*``.

    ``direct_evals`` counts applications of ``L`` or ``L*`` to a vector;
    ``cached_evals`` counts images obtained by the linear recursions instead.
    """

    n: int
    x: np.ndarray
    mu: np.ndarray
    x_prev: np.ndarray
    mu_prev: np.ndarray
    a: float = 0.0
    Lx: np.ndarray | None = None
    Lx_prev: np.ndarray | None = None
    Lt_mu: np.ndarray | None = None
    Lt_mu_prev: np.ndarray | None = None
    step_norm_sq: float = 0.0          # |w_n - w_{n-1}|_M^2
    direct_evals: int = 0
    cached_evals: int = 0
    last: "InertialInfo | None" = None

    @classmethod
    def initial(cls, x0, mu0) -> "InertialState":
        x0 = np.array(x0, dtype=float).reshape(-1)
        mu0 = np.array(mu0, dtype=float).reshape(-1)
        return cls(0, x0, mu0, x0.copy(), mu0.copy())

    @property
    def w(self) -> np.ndarray:
        return np.concatenate([self.x, self.mu])


@dataclass
class InertialInfo:
    """Quantities of step ``n``, shaped like :class:`~devsplit.fb.StepInfo` for tracing.

    The stacked vectors ``x`` (that is ``w_n``), ``p``, ``u`` and ``v`` are
    assembled on access from the blocks kept here.
    """

    n: int
    w_x: np.ndarray
    w_mu: np.ndarray
    p_x: np.ndarray
    p_mu: np.ndarray
    dx: np.ndarray         # w_n - w_{n-1}, primal block
    dmu: np.ndarray
    gamma: float
    lam: float
    zeta: float
    ell_sq: float
    residual: float
    weight_u: float
    weight_v: float
    u_norm_sq: float
    v_norm_sq: float
    a: float
    a_next: float
    x_hat: np.ndarray
    mu_hat: np.ndarray
    L_x_hat: np.ndarray
    Lt_mu_hat: np.ndarray
    lhs: float             # a_{n+1}^2 |w_{n+1} - w_n|_M^2
    rhs: float

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.w_x, self.w_mu])

    @property
    def p(self) -> np.ndarray:
        return np.concatenate([self.p_x, self.p_mu])

    @property
    def u(self) -> np.ndarray:
        return np.zeros(self.w_x.size + self.w_mu.size)

    @property
    def v(self) -> np.ndarray:
        return self.a * np.concatenate([self.dx, self.dmu])


SATURATION_MARGIN = 1.0 - 1e-9


def inertial_rhs_factor(lam: float, lam_next: float) -> float:
    return lam * (2.0 - lam) * (2.0 - lam_next) / lam_next


def inertial_step(state: InertialState, prob: PdProblem, s: Schedules, a_max: float = 10.0) -> InertialState:
    """One iteration of the inertial method.

    The momentum scaling for the next step saturates the norm condition,
    ``a_{n+1} = min(a_max, sqrt(rhs) / |w_{n+1} - w_n|_M)`` (times
    :data:`SATURATION_MARGIN`), and is zero when the step vanishes.
    """
    if not prob.C.is_zero:
        raise ValueError("the inertial method requires C = 0")
    L, tau, sigma = prob.L, prob.tau, prob.sigma
    n = state.n
    lam, lam_next, zeta = s.lam(n), s.lam(n + 1), s.zeta(n)
    direct, cached = state.direct_evals, state.cached_evals
    x, mu, a = state.x, state.mu, state.a

    if n == 0:
        Lx, Lt_mu = L.apply(x), L.adjoint_apply(mu)
        direct += 2
        # w_{-1} = w_0, so the extrapolated point is w_0 itself
        dx, dmu = np.zeros_like(x), np.zeros_like(mu)
        dLt = np.zeros_like(Lt_mu)
        x_h, mu_h, L_xh, Lt_muh = x, mu, Lx, Lt_mu
    else:
        Lx, Lt_mu = state.Lx, state.Lt_mu
        dx, dmu = x - state.x_prev, mu - state.mu_prev
        dLt = Lt_mu - state.Lt_mu_prev
        x_h, mu_h = x + a * dx, mu + a * dmu
        L_xh = Lx + a * (Lx - state.Lx_prev)
        Lt_muh = Lt_mu + a * dLt
        cached += 2

    p_x = prob.A.resolve(tau, x_h - tau * Lt_muh)
    L_px = L.apply(p_x)
    p_mu = prob.dual_resolvent(mu_h + sigma * (2.0 * L_px - L_xh))
    Lt_pmu = L.adjoint_apply(p_mu)
    direct += 2

    # w_{n+1} - w_n and its images, from the same recursion as the iterate
    Dx, Dmu = lam * (p_x - x_h), lam * (p_mu - mu_h)
    DLx, DLt = lam * (L_px - L_xh), lam * (Lt_pmu - Lt_muh)
    cached += 2

    ratio = tau / sigma

    def mnorm(px, pm, lt_pm):
        return float(px @ px - 2.0 * tau * (px @ lt_pm) + ratio * (pm @ pm))

    step_sq = mnorm(Dx, Dmu, DLt)
    if not np.isfinite(step_sq):
        raise SolverAbort(f"non-finite iterate at n={n}")
    step_sq = max(step_sq, 0.0)

    # ell_n^2 with beta = 0, u = 0, v_n = a_n (w_n - w_{n-1});
    # p - w + c v = (w_{n+1} - w_n) / lam + (c + 1) v
    ca = a * (1.0 / (2.0 - lam))
    ell = max(lam * (2.0 - lam) * mnorm(Dx / lam + ca * dx, Dmu / lam + ca * dmu, DLt / lam + ca * dLt), 0.0)
    rhs = zeta * (2.0 - lam_next) / lam_next * ell
    # back off by a hair: the cached M-norms and a recomputation from the
    # stored iterates differ by cancellation error of order 1e-11
    a_next = min(a_max, SATURATION_MARGIN * float(np.sqrt(rhs / step_sq))) if step_sq > 0.0 else 0.0

    # residual bound with beta = 0: |w - p + v|_M / tau, and w - p + v = -(w_{n+1} - w_n) / lam
    residual = float(np.sqrt(step_sq)) / (lam * tau)

    info = InertialInfo(
        n=n, w_x=x, w_mu=mu, p_x=p_x, p_mu=p_mu, dx=dx, dmu=dmu,
        gamma=tau, lam=lam, zeta=zeta, ell_sq=ell, residual=residual, weight_u=0.0,
        weight_v=lam / (2.0 - lam), u_norm_sq=0.0, v_norm_sq=a * a * state.step_norm_sq, a=a, a_next=a_next,
        x_hat=x_h, mu_hat=mu_h, L_x_hat=L_xh, Lt_mu_hat=Lt_muh,
        lhs=a_next * a_next * step_sq, rhs=rhs,
    )
    return InertialState(n + 1, x + Dx, mu + Dmu, x, mu, a_next, Lx + DLx, Lx, Lt_mu + DLt, Lt_mu,
                         step_norm_sq=step_sq, direct_evals=direct, cached_evals=cached, last=info)


def cached_apply(state: InertialState) -> dict[str, np.ndarray]:
    """Cached images ``L x_n``, ``L* mu_n`` and, for the last step, ``L x_hat``, ``L* mu_hat``."""
    out = {"Lx": state.Lx, "Lt_mu": state.Lt_mu}
    if state.last is not None:
        out["L_x_hat"] = state.last.L_x_hat
        out["Lt_mu_hat"] = state.last.Lt_mu_hat
    return out


def inertial_solve(prob: PdProblem, s: Schedules, x0, mu0, max_iter: int = 10000, residual_tol: float = 0.0,
                   reference=None, a_max: float = 10.0, keep_iterates: bool = False,
                   on_step: Callable[[InertialState], None] | None = None) -> IterationTrace:
    """Driver for :func:`inertial_step`; ``scaling_a`` in the trace is the ``a_n`` used at step ``n``."""
    state = InertialState.initial(x0, mu0)
    trace = IterationTrace(kind="inertial_pd", beta=0.0, metric=prob.metric, reference=reference,
                           keep_iterates=keep_iterates)
    trace.start(state.w)
    for _ in range(max_iter):
        try:
            state = inertial_step(state, prob, s, a_max=a_max)
        except SolverAbort as exc:
            exc.trace = trace.finish("aborted")
            raise
        trace.record(state.last, state.w, a=state.last.a)
        if on_step is not None:
            on_step(state)
        if state.last.residual <= residual_tol:
            break
    trace.meta["direct_evals"] = state.direct_evals
    trace.meta["cached_evals"] = state.cached_evals
    return trace.finish("converged" if state.last.residual <= residual_tol else "max_iter")

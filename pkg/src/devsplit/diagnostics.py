"""Post-hoc audits of a finished run against a known solution.

Every check uses the relative slack ``slack * (1 + scale)``; it only absorbs
rounding, the inequalities themselves are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fb import budget_weights, ell_sq
from .metric import Metric, PdPoint
from .trace import IterationTrace


class MissingTraceFieldError(ValueError):
    pass


@dataclass
class Violation:
    check: str
    index: int
    lhs: float
    rhs: float

    @property
    def amount(self) -> float:
        return self.lhs - self.rhs


@dataclass
class LyapunovReport:
    """Both sides of the two Lyapunov inequalities at every step.

    ``one_step`` is the inequality with the deviation terms of step ``n``;
    ``telescoped`` replaces them by ``zeta_{n-1} ell_{n-1}^2``. The budget
    and Fejer-type checks are reported alongside.
    """

    one_step_lhs: np.ndarray
    one_step_rhs: np.ndarray
    telescoped_lhs: np.ndarray
    telescoped_rhs: np.ndarray
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_violation(self) -> float:
        return max((v.amount for v in self.violations), default=0.0)

    @property
    def first_violation(self) -> int | None:
        return min((v.index for v in self.violations), default=None)

    def summary(self) -> dict:
        by_check: dict[str, int] = {}
        for v in self.violations:
            by_check[v.check] = by_check.get(v.check, 0) + 1
        return {"steps": int(self.one_step_lhs.size), "violations": len(self.violations),
                "by_check": by_check, "max_violation": self.max_violation,
                "first_violation": self.first_violation}


@dataclass
class _Series:
    dist_sq: np.ndarray      # K + 1 entries
    ell_sq: np.ndarray       # K entries
    zeta: np.ndarray
    deviation: np.ndarray    # w_u |u_n|^2 + w_v |v_n|^2
    u_norm: np.ndarray
    v_norm: np.ndarray


def _series(trace: IterationTrace, x_star, metric: Metric | None, recompute: bool) -> _Series:
    M = metric if metric is not None else trace.metric
    K = len(trace)
    it = trace.iterates
    have_vectors = bool(it["x"]) and len(it["p"]) == K
    if isinstance(x_star, PdPoint):
        x_star = x_star.stack()
    if x_star is not None and it["x"]:
        xs = np.asarray(x_star, dtype=float)
        D = np.array([M.norm_sq(x - xs) for x in it["x"]])
    elif trace.dist_sq:
        D = trace.array("dist_sq")
    else:
        raise MissingTraceFieldError("trace has neither iterates nor distances to a reference")
    if D.size != K + 1:
        raise MissingTraceFieldError(f"expected {K + 1} distances, found {D.size}")
    gamma, lam, zeta = trace.array("gamma"), trace.array("lam"), trace.array("zeta")
    beta = trace.beta
    if recompute and have_vectors:
        ell = np.empty(K)
        dev = np.empty(K)
        un = np.empty(K)
        vn = np.empty(K)
        for n in range(K):
            x, p, u, v = it["x"][n], it["p"][n], it["u"][n], it["v"][n]
            ell[n] = ell_sq(x, p, u, v, gamma[n], lam[n], beta, M)
            wu, wv = budget_weights(gamma[n], lam[n], beta)
            un[n] = M.norm_sq(u) if np.any(u) else 0.0
            vn[n] = M.norm_sq(v) if np.any(v) else 0.0
            dev[n] = wu * un[n] + wv * vn[n]
    else:
        ell = trace.array("ell_sq")
        un, vn = trace.array("u_norm_sq"), trace.array("v_norm_sq")
        dev = trace.array("weight_u") * un + trace.array("weight_v") * vn
    return _Series(D, ell, zeta, dev, np.sqrt(np.maximum(un, 0)), np.sqrt(np.maximum(vn, 0)))


def check_lyapunov(trace: IterationTrace, x_star=None, metric: Metric | None = None, s=None,
                   slack: float = 1e-9, budget_slack: float = 1e-12, recompute: bool = True) -> LyapunovReport:
    """Evaluate the Lyapunov inequalities, the deviation budget and Fejer monotonicity.

    With kept iterates, distances, ``ell_n^2`` and deviation norms are
    recomputed from the vectors; otherwise the recorded scalars are used.
    ``s`` is accepted for symmetry with the solver API; the per-step
    parameters are taken from the trace.
    """
    S = _series(trace, x_star, metric, recompute)
    D, ell, zeta, dev = S.dist_sq, S.ell_sq, S.zeta, S.deviation
    K = ell.size
    prev = np.concatenate([[0.0], zeta[:-1] * ell[:-1]]) if K else np.zeros(0)
    lhs = D[1:] + ell
    rhs1 = D[:-1] + dev
    rhs2 = D[:-1] + prev
    tol = slack * (1.0 + D[:-1])
    out: list[Violation] = []
    for n in np.nonzero(lhs > rhs1 + tol)[0]:
        out.append(Violation("one_step", int(n), float(lhs[n]), float(rhs1[n])))
    for n in np.nonzero(lhs > rhs2 + tol)[0]:
        out.append(Violation("telescoped", int(n), float(lhs[n]), float(rhs2[n])))
    btol = budget_slack * (1.0 + prev)
    for n in np.nonzero(dev > prev + btol)[0]:
        out.append(Violation("budget", int(n), float(dev[n]), float(prev[n])))
    if K >= 2:
        fej = D[1:] + ell                    # value at n+1: |x_{n+1}-x*|^2 + ell_n^2
        for n in np.nonzero(fej[1:] > fej[:-1] + slack * (1.0 + fej[:-1]))[0]:
            out.append(Violation("fejer", int(n + 1), float(fej[n + 1]), float(fej[n])))
    return LyapunovReport(lhs, rhs1, lhs.copy(), rhs2, out)


@dataclass
class SummabilityAudit:
    partial_sums: np.ndarray
    bound: float
    ok: bool


def audit_summability(trace: IterationTrace, x_star=None, metric: Metric | None = None,
                      slack: float = 1e-9) -> SummabilityAudit:
    """Partial sums of ``(1 - zeta_n) ell_n^2`` for ``n >= 1`` against ``|x_1 - x*|^2 + zeta_0 ell_0^2``."""
    S = _series(trace, x_star, metric, recompute=True)
    if S.ell_sq.size < 2:
        return SummabilityAudit(np.zeros(0), 0.0, True)
    sums = np.cumsum((1.0 - S.zeta[1:]) * S.ell_sq[1:])
    bound = S.dist_sq[1] + S.zeta[0] * S.ell_sq[0]
    return SummabilityAudit(sums, float(bound), bool(np.all(sums <= bound + slack * (1.0 + bound))))


def deviation_tail(trace: IterationTrace, x_star=None, metric: Metric | None = None,
                   fraction: float = 0.1) -> float:
    """``max(|u_n|_M, |v_n|_M)`` over the last ``fraction`` of the run, over the initial distance."""
    S = _series(trace, x_star, metric, recompute=True)
    K = S.ell_sq.size
    start = int(np.floor(K * (1.0 - fraction)))
    tail = max(S.u_norm[start:].max(initial=0.0), S.v_norm[start:].max(initial=0.0))
    d0 = float(np.sqrt(S.dist_sq[0]))
    return tail / d0 if d0 > 0 else tail


@dataclass
class RateFit:
    q_hat: float
    r_squared: float
    window: tuple[int, int]
    flag: str | None = None


def fit_linear_rate(distances, window: float | tuple[int, int] = 0.5, floor: float = 0.0) -> RateFit:
    """Least-squares fit of ``log d_n`` against ``n``.

    ``window`` is either the fraction of the run to skip at the start or an
    explicit ``(start, stop)`` index range. Returns ``q_hat = exp(2 slope)``,
    the per-iteration contraction of the squared distance. Entries at or
    below ``floor`` are dropped; if fewer than two remain the fit is flagged
    ``"degenerate"`` and ``q_hat`` is NaN.
    """
    d = np.asarray(distances, dtype=float)
    if d.size < 20:
        raise ValueError("need at least 20 distances")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and nonnegative")
    if isinstance(window, tuple):
        lo, hi = window
    else:
        lo, hi = int(np.floor(d.size * window)), d.size
    n = np.arange(lo, hi)
    seg = d[lo:hi]
    keep = seg > floor
    n, seg = n[keep], seg[keep]
    if seg.size < 2:
        return RateFit(float("nan"), float("nan"), (lo, hi), "degenerate")
    y = np.log(seg)
    slope, intercept = np.polyfit(n.astype(float), y, 1)
    resid = y - (slope * n + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot <= 1e-24 * max(1.0, float((y ** 2).sum())):
        return RateFit(float(np.exp(2.0 * slope)), float("nan"), (lo, hi), "r2-undefined")
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot
    return RateFit(float(np.exp(2.0 * slope)), r2, (lo, hi))

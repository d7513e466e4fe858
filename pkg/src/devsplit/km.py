"""Krasnosel'skii--Mann iteration with deviations.

For a nonexpansive ``T`` the averaged map ``J = (Id + T) / 2`` is firmly
nonexpansive, hence the resolvent of some maximally monotone operator. The
iteration is then forward--backward with ``C = 0``, ``M = Id`` and ``u = 0``::

    p = (x + v) / 2 + T(x + v) / 2
    x_next = (1 - lam) x + lam (p - v)

with next deviations limited by
``|v'|^2 <= zeta lam (2 - lam) (2 - lam') / lam' |p - x + (lam - 1) / (2 - lam) v|^2``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .fb import FbProblem, FbState, SolverAbort, advance, deviate
from .operators import ResolventOperator
from .schedules import Schedules
from .trace import IterationTrace


class NonexpansiveMap:
    """``T`` with ``|T x - T y| <= |x - y|``. Subclasses implement :meth:`apply`."""

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(np.asarray(x, dtype=float))


class FunctionMap(NonexpansiveMap):
    """Wraps a callable; nonexpansiveness is the caller's promise."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def apply(self, x):
        return np.asarray(self.fn(x), dtype=float)


class Rotation(NonexpansiveMap):
    """Rotation by ``angle`` in the plane; the only fixed point is the origin (for ``angle`` not a multiple of 2 pi)."""

    def __init__(self, angle: float = np.pi / 2):
        self.angle = float(angle)
        c, s = np.cos(angle), np.sin(angle)
        self.matrix = np.array([[c, -s], [s, c]])

    def apply(self, x):
        return self.matrix @ x


class BoxProjection(NonexpansiveMap):
    """Projection onto ``{x : lower <= x <= upper}``."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("empty box: lower > upper somewhere")

    def apply(self, x):
        return np.clip(x, self.lower, self.upper)


class BallProjection(NonexpansiveMap):
    """Projection onto the closed Euclidean ball of ``radius`` around ``center``."""

    def __init__(self, center, radius: float):
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def apply(self, x):
        d = x - self.center
        nd = float(np.linalg.norm(d))
        if nd <= self.radius:
            return x.copy()
        return self.center + (self.radius / nd) * d


class HalfspaceProjection(NonexpansiveMap):
    """Projection onto ``{x : <a, x> <= b}``."""

    def __init__(self, a, b: float):
        self.a = np.asarray(a, dtype=float)
        self.b = float(b)
        self._aa = float(self.a @ self.a)
        if self._aa == 0:
            raise ValueError("normal vector must be nonzero")

    def apply(self, x):
        excess = float(self.a @ x) - self.b
        if excess <= 0:
            return x.copy()
        return x - (excess / self._aa) * self.a


class Composition(NonexpansiveMap):
    """``maps[0] o maps[1] o ...``; a composition of nonexpansive maps is nonexpansive."""

    def __init__(self, maps: Sequence[NonexpansiveMap]):
        if not maps:
            raise ValueError("need at least one map")
        self.maps = list(maps)

    def apply(self, x):
        for T in reversed(self.maps):
            x = T.apply(x)
        return x


class AveragedResolvent(ResolventOperator):
    """``J = (Id + T) / 2``, independent of the step size."""

    def __init__(self, T: NonexpansiveMap):
        self.T = T

    def resolve(self, gamma, w):
        return 0.5 * w + 0.5 * self.T(w)


def km_problem(T: NonexpansiveMap) -> FbProblem:
    return FbProblem(A=AveragedResolvent(T))


def km_initial(x0) -> FbState:
    return FbState.initial(x0)


def km_advance(state: FbState, T: NonexpansiveMap | FbProblem, s: Schedules) -> FbState:
    """Update ``x``; the recorded residual is the fixed-point residual ``|T z_n - z_n|`` with ``z_n = x_n + v_n``."""
    problem = T if isinstance(T, FbProblem) else km_problem(T)
    if np.any(state.u):
        raise ValueError("the Krasnosel'skii--Mann iteration has no u deviation")
    state = advance(state, problem, s)
    info = state.last
    # p - z = (T z - z) / 2
    info.residual = 2.0 * float(np.linalg.norm(info.p - info.z))
    return state


def km_step(state: FbState, T: NonexpansiveMap | FbProblem, s: Schedules, policy=None) -> FbState:
    """One iteration; ``policy`` proposes ``v_{n+1}`` (any ``u`` it returns is discarded)."""
    problem = T if isinstance(T, FbProblem) else km_problem(T)
    return deviate(km_advance(state, problem, s), problem, s, policy)


def km_solve(T: NonexpansiveMap, s: Schedules, x0, policy=None, max_iter: int = 10000, residual_tol: float = 0.0,
             reference=None, keep_iterates: bool = False) -> IterationTrace:
    """Run until the fixed-point residual ``|T z_n - z_n|`` is at most ``residual_tol``."""
    problem = km_problem(T)
    state = km_initial(x0)
    trace = IterationTrace(kind="km", beta=0.0, reference=reference, keep_iterates=keep_iterates)
    trace.start(state.x)
    for _ in range(max_iter):
        try:
            state = km_advance(state, problem, s)
        except SolverAbort as exc:
            exc.trace = trace.finish("aborted")
            raise
        trace.record(state.last, state.x)
        if state.last.residual <= residual_tol:
            return trace.finish("converged")
        state = deviate(state, problem, s, policy)
    return trace.finish("max_iter")


def km_budget_factor(lam: float, lam_next: float) -> float:
    """``lam (2 - lam) (2 - lam') / lam'``, the coefficient in the KM budget."""
    return lam * (2.0 - lam) * (2.0 - lam_next) / lam_next

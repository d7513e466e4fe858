"""Small problem instances with known or cheaply certified solutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fb import FbProblem
from .operators import (CocoerciveOperator, FunctionResolvent, L1Resolvent, MatrixMap, make_quadratic_gradient,
                        zero_operator)
from .primal_dual import PdProblem
from .schedules import Schedules, rng_for


def toy1d() -> FbProblem:
    """``0 in d|x| + (x - 1)``: ``A = d|.|``, ``C x = x - 1`` (``beta = 1``). Solution ``x* = 0``."""
    C = CocoerciveOperator(eval=lambda x: x - 1.0, beta=1.0)
    return FbProblem(A=L1Resolvent(1.0), C=C)


TOY1D_SOLUTION = np.zeros(1)


@dataclass
class SyntheticFb:
    """``min_x  x'Qx/2 - b'x + w |x|_1`` with a random PSD ``Q``."""

    problem: FbProblem
    Q: np.ndarray
    b: np.ndarray
    weight: float
    seed: int

    @property
    def dim(self) -> int:
        return self.b.size

    def default_schedules(self, lam: float = 1.0, zeta=0.0, epsilon: float = 1e-6) -> Schedules:
        """``gamma = 1.9 / beta``, safely inside ``(epsilon, (4 - 3 epsilon)/beta)``."""
        return Schedules.build(epsilon, 1.9 / self.problem.beta, lam, zeta)

    def solution(self, tol: float = 1e-14, max_iter: int = 200_000) -> np.ndarray:
        """Minimizer from a long zero-deviation run (the problem is strongly convex when ``Q`` is PD).

        A bare forward--backward loop with ``gamma = 1.9 / beta`` and ``lambda = 1``. Without deviations
        the residual bound reduces to ``|x - p| / gamma``, which is the stopping test.
        """
        gamma = 1.9 / self.problem.beta
        A, C = self.problem.A, self.problem.C
        x = np.zeros(self.dim)
        for _ in range(max_iter):
            p = A.resolve(gamma, x - gamma * C(x))
            if not np.isfinite(p).all():
                raise FloatingPointError("reference run diverged")
            r = float(np.linalg.norm(x - p)) / gamma
            x = p
            if r <= tol:
                return x.copy()
        raise RuntimeError(f"reference run did not reach residual {tol:g} in {max_iter} iterations")


def synthetic_fb(seed: int, dim: int = 10, weight: float = 0.1) -> SyntheticFb:
    """Random ``l1``-regularized quadratic of dimension ``dim``, reproducible from ``seed``."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = rng_for(seed, "problem.synthetic_fb")
    G = rng.standard_normal((dim + 5, dim))
    Q = G.T @ G / (dim + 5) + 0.05 * np.eye(dim)
    b = rng.standard_normal(dim)
    C = make_quadratic_gradient(Q, b, seed=seed)
    return SyntheticFb(FbProblem(A=L1Resolvent(weight), C=C), Q, b, weight, seed)


def linear_resolvent(S: np.ndarray):
    """``gamma -> (I + gamma S)^-1`` for a linear monotone ``S`` (``S + S'`` PSD)."""
    n = S.shape[0]

    def resolve(gamma, w):
        return np.linalg.solve(np.eye(n) + gamma * S, w)

    return resolve


def random_monotone_matrix(rng: np.random.Generator, n: int) -> np.ndarray:
    """PSD part plus a skew part: monotone but in general not symmetric."""
    G = rng.standard_normal((n, n))
    K = rng.standard_normal((n, n))
    return G @ G.T / n + 0.5 * (K - K.T)


@dataclass
class SyntheticPd:
    """Primal--dual problem with linear monotone ``A``, ``B`` and a quadratic ``C``."""

    problem: PdProblem
    A_mat: np.ndarray
    B_mat: np.ndarray
    L_mat: np.ndarray
    Q: np.ndarray
    c: np.ndarray


def synthetic_pd(seed: int, n_primal: int = 3, n_dual: int = 4, with_C: bool = True,
                 step_factor: float = 0.9) -> SyntheticPd:
    """Random instance small enough for explicit assembly of the stacked operator."""
    rng = rng_for(seed, "problem.synthetic_pd")
    A_mat = random_monotone_matrix(rng, n_primal)
    B_mat = random_monotone_matrix(rng, n_dual) + 0.1 * np.eye(n_dual)
    L_mat = rng.standard_normal((n_dual, n_primal))
    L = MatrixMap(L_mat)
    norm_L = float(np.linalg.norm(L_mat, 2))
    if with_C:
        G = rng.standard_normal((n_primal, n_primal))
        Q = G @ G.T / n_primal
        c = rng.standard_normal(n_primal)
        C = CocoerciveOperator(eval=lambda x: Q @ x - c, beta=float(np.linalg.eigvalsh(Q).max()))
    else:
        Q, c = np.zeros((n_primal, n_primal)), np.zeros(n_primal)
        C = zero_operator()
    # tau = sigma, so sigma tau |L|^2 <= step_factor^2; with C present tau is
    # also kept below half of 1/beta in the block metric
    tau = step_factor / norm_L
    if with_C and C.beta > 0:
        tau = min(tau, 0.5 * (1.0 - step_factor ** 2) / C.beta)
    B_res = linear_resolvent(B_mat)
    prob = PdProblem(A=FunctionResolvent(linear_resolvent(A_mat)), f_prox=lambda v, t: B_res(t, v), L=L,
                     tau=tau, sigma=tau, C=C, norm_L=norm_L)
    return SyntheticPd(prob, A_mat, B_mat, L_mat, Q, c)

"""Preconditioning metrics and the spectral-norm estimate used to build them.

Vectors are plain 1-D float arrays. A primal--dual vector is stored flat as
``concatenate([x, mu])``; :class:`PdPoint` is accepted wherever a flat
vector is and is split/joined by the metric that owns the block layout.
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np


class DimensionError(ValueError):
    """Raised when a vector does not fit the metric or operator it meets."""


class UnsupportedMetricError(TypeError):
    """Raised when an operation is not available for a metric kind."""


class NonConvergenceWarning(RuntimeWarning):
    pass


class PdPoint(NamedTuple):
    """Primal--dual pair ``(x, mu)``."""

    primal: np.ndarray
    dual: np.ndarray

    def stack(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.primal, float), np.asarray(self.dual, float)])


def _as_flat(a) -> np.ndarray:
    if isinstance(a, PdPoint):
        return a.stack()
    return np.asarray(a, dtype=float).reshape(-1)


class Metric:
    """Strongly positive self-adjoint form ``M``."""

    dim: int | None = None

    def apply(self, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check(self, a: np.ndarray) -> np.ndarray:
        if type(a) is not np.ndarray or a.ndim != 1 or a.dtype != np.float64:
            a = _as_flat(a)
        if self.dim is not None and a.shape[0] != self.dim:
            raise DimensionError(f"vector of size {a.shape[0]} does not match metric of size {self.dim}")
        return a

    def inner(self, a, b) -> float:
        a, b = self._check(a), self._check(b)
        if a.shape != b.shape:
            raise DimensionError(f"size mismatch: {a.shape[0]} vs {b.shape[0]}")
        return float(a @ self.apply(b))

    def norm_sq(self, a) -> float:
        return self.inner(a, a)

    def norm(self, a) -> float:
        return float(np.sqrt(max(self.norm_sq(a), 0.0)))

    def inv_norm_sq(self, a) -> float:
        raise UnsupportedMetricError(f"M^-1 norms are not available for {type(self).__name__}")


class IdentityMetric(Metric):
    """Canonical Euclidean inner product. ``dim=None`` accepts any size."""

    def __init__(self, dim: int | None = None):
        self.dim = dim

    def apply(self, a):
        return self._check(a)

    def inner(self, a, b) -> float:
        a, b = self._check(a), self._check(b)
        if a.shape != b.shape:
            raise DimensionError(f"size mismatch: {a.shape[0]} vs {b.shape[0]}")
        return float(a @ b)

    def norm_sq(self, a) -> float:
        if self.dim is None and type(a) is np.ndarray and a.ndim == 1 and a.dtype == np.float64:
            return float(a.dot(a))
        a = self._check(a)
        return float(a @ a)

    def inv_norm_sq(self, a) -> float:
        return self.norm_sq(a)

    def __repr__(self):
        return f"IdentityMetric(dim={self.dim})"


class PrimalDualMetric(Metric):
    """Block metric ``[[I, -tau L*], [-tau L, (tau/sigma) I]]``.

    Never assembled; products are evaluated blockwise with one application
    each of ``L`` and ``L*``.

    Parameters
    ----------
    tau, sigma : float
        Primal and dual step sizes.
    L : linear map
        Object with ``apply``, ``adjoint_apply``, ``in_dim`` and ``out_dim``.
    norm_L : float, optional
        Operator norm of ``L``. Estimated by power iteration when omitted.
    margin : float
        The metric is rejected unless ``sigma*tau*|L|^2 * (1 + margin) < 1``.
    """

    def __init__(self, tau: float, sigma: float, L, norm_L: float | None = None,
                 margin: float = 1e-9, seed: int = 0):
        if tau <= 0 or sigma <= 0:
            raise ValueError("tau and sigma must be positive")
        self.tau = float(tau)
        self.sigma = float(sigma)
        self.L = L
        self.n_primal = int(L.in_dim)
        self.n_dual = int(L.out_dim)
        self.dim = self.n_primal + self.n_dual
        self.norm_L = float(norm_L) if norm_L is not None else operator_norm_estimate(L, seed=seed)
        self.contraction = self.sigma * self.tau * self.norm_L ** 2
        if not self.contraction * (1.0 + margin) < 1.0:
            raise ValueError(
                f"primal-dual metric is not positive definite: sigma*tau*|L|^2 = {self.contraction:.6g} "
                "(must be < 1)"
            )

    def split(self, w) -> tuple[np.ndarray, np.ndarray]:
        w = self._check(w)
        return w[: self.n_primal], w[self.n_primal:]

    def join(self, x, mu) -> np.ndarray:
        return np.concatenate([x, mu])

    def apply(self, w) -> np.ndarray:
        x, mu = self.split(w)
        return np.concatenate([
            x - self.tau * self.L.adjoint_apply(mu),
            -self.tau * self.L.apply(x) + (self.tau / self.sigma) * mu,
        ])

    def inner(self, a, b) -> float:
        x1, m1 = self.split(a)
        x2, m2 = self.split(b)
        return float(
            x1 @ x2
            - self.tau * (self.L.apply(x1) @ m2)
            - self.tau * (self.L.apply(x2) @ m1)
            + (self.tau / self.sigma) * (m1 @ m2)
        )

    def norm_sq(self, a) -> float:
        x, mu = self.split(a)
        return float(x @ x - 2.0 * self.tau * (self.L.apply(x) @ mu) + (self.tau / self.sigma) * (mu @ mu))

    def norm_sq_cached(self, x, mu, Lstar_mu) -> float:
        """``|(x, mu)|_M^2`` given a precomputed ``L* mu``."""
        return float(x @ x - 2.0 * self.tau * (x @ Lstar_mu) + (self.tau / self.sigma) * (mu @ mu))

    def dense(self) -> np.ndarray:
        """Explicit matrix, for testing on small instances."""
        n = self.dim
        return np.column_stack([self.apply(e) for e in np.eye(n)])

    def __repr__(self):
        return (f"PrimalDualMetric(tau={self.tau:g}, sigma={self.sigma:g}, "
                f"primal={self.n_primal}, dual={self.n_dual})")


def m_inner(metric: Metric, a, b) -> float:
    return metric.inner(a, b)


def m_norm_sq(metric: Metric, a) -> float:
    return metric.norm_sq(a)


def m_inv_norm_sq(metric: Metric, a) -> float:
    return metric.inv_norm_sq(a)


def operator_norm_estimate(L, max_iters: int = 5000, tol: float = 1e-12, seed: int = 0,
                           return_info: bool = False):
    """Spectral norm of ``L`` by power iteration on ``L* L``.

    Starts from a seeded Gaussian vector and stops once successive estimates
    agree to relative tolerance ``tol``. When ``max_iters`` is exhausted a
    :class:`NonConvergenceWarning` is issued and the last estimate returned.

    Returns the estimate, or ``(estimate, converged)`` with ``return_info``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(int(L.in_dim))
    x /= np.linalg.norm(x)
    est = 0.0
    converged = False
    for _ in range(max_iters):
        y = L.adjoint_apply(L.apply(x))
        ny = np.linalg.norm(y)
        if ny == 0.0:
            # the random start can only be annihilated by the zero map (a.s.)
            raise ValueError("operator_norm_estimate requires a nonzero linear map")
        new = float(np.sqrt(x @ y))  # Rayleigh quotient of L*L at unit x
        x = y / ny
        if abs(new - est) <= tol * new:
            est = new
            converged = True
            break
        est = new
    if not converged:
        warnings.warn(f"power iteration did not reach tol={tol:g} in {max_iters} iterations",
                      NonConvergenceWarning, stacklevel=2)
    return (est, converged) if return_info else est

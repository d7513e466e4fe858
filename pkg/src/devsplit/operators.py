"""Linear maps, resolvents and cocoercive operators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .metric import DimensionError, operator_norm_estimate


class LinearMap:
    """Bounded linear map with its adjoint."""

    in_dim: int
    out_dim: int

    def apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint_apply(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class MatrixMap(LinearMap):
    """``x -> A @ x`` for a dense or scipy-sparse matrix ``A``."""

    def __init__(self, A):
        if hasattr(A, "tocsr"):
            self.A = A.tocsr()
            self.At = self.A.T.tocsr()
        else:
            self.A = np.atleast_2d(np.asarray(A, dtype=float))
            self.At = np.ascontiguousarray(self.A.T)
        self.out_dim, self.in_dim = self.A.shape

    def apply(self, x):
        if x.shape[0] != self.in_dim:
            raise DimensionError(f"L expects size {self.in_dim}, got {x.shape[0]}")
        return self.A @ x

    def adjoint_apply(self, mu):
        if mu.shape[0] != self.out_dim:
            raise DimensionError(f"L* expects size {self.out_dim}, got {mu.shape[0]}")
        return self.At @ mu

    def toarray(self) -> np.ndarray:
        return self.A.toarray() if hasattr(self.A, "toarray") else np.array(self.A)


# -- proximal maps ---------------------------------------------------------

def prox_l1(x, theta: float, indices=None) -> np.ndarray:
    """Soft thresholding ``sign(x) * max(|x| - theta, 0)``.

    Only the coordinates in ``indices`` (all when ``None``) are thresholded;
    the rest pass through unchanged.
    """
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    x = np.asarray(x, dtype=float)
    if theta == 0:
        return x.copy()
    if indices is None:
        return x - np.clip(x, -theta, theta)
    out = x.copy()
    xi = x[indices]
    out[indices] = xi - np.clip(xi, -theta, theta)
    return out


def prox_hinge_sum(z, rho: float) -> np.ndarray:
    """Prox of ``rho * sum(max(0, 1 - z_i))``, coordinatewise."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    z = np.asarray(z, dtype=float)
    # z if z >= 1, z + rho if z <= 1 - rho, else 1
    return np.minimum(z + rho, np.maximum(z, 1.0))


def resolvent_conjugate(prox_f: Callable[[np.ndarray, float], np.ndarray], y, sigma: float) -> np.ndarray:
    """Resolvent of ``sigma * (df)^-1`` from ``prox_f(v, t) = prox_{t f}(v)``.

    Uses the Moreau decomposition ``y - sigma * prox_{f/sigma}(y / sigma)``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = np.asarray(y, dtype=float)
    return y - sigma * prox_f(y / sigma, 1.0 / sigma)


# -- resolvents of maximally monotone A ------------------------------------

class ResolventOperator:
    """Provides ``J_{gamma A} = (Id + gamma A)^-1``."""

    def resolve(self, gamma: float, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, gamma, w):
        return self.resolve(gamma, w)


class ZeroResolvent(ResolventOperator):
    """``A = 0``: the resolvent is the identity."""

    def resolve(self, gamma, w):
        return np.array(w, dtype=float)


class L1Resolvent(ResolventOperator):
    """``A = d(weight * |x_I|_1)`` for a coordinate set ``I``."""

    def __init__(self, weight: float, indices=None):
        if weight < 0:
            raise ValueError("weight must be nonnegative")
        self.weight = float(weight)
        self.indices = None if indices is None else np.asarray(indices, dtype=int)
        self._mask = None

    def resolve(self, gamma, w):
        if self.indices is None:
            return prox_l1(w, gamma * self.weight)
        if self._mask is None or self._mask.shape != w.shape:
            mask = np.zeros(w.shape)
            mask[self.indices] = 1.0
            self._mask = mask
        t = (gamma * self.weight) * self._mask
        return w - np.clip(w, -t, t)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        part = x if self.indices is None else x[self.indices]
        return self.weight * float(np.abs(part).sum())


class FunctionResolvent(ResolventOperator):
    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray]):
        self.fn = fn

    def resolve(self, gamma, w):
        return self.fn(gamma, w)


# -- cocoercive C ----------------------------------------------------------

@dataclass(frozen=True)
class CocoerciveOperator:
    """Single-valued ``C`` that is ``1/beta``-cocoercive.

    ``beta = 0`` encodes ``C = 0``.
    """

    eval: Callable[[np.ndarray], np.ndarray]
    beta: float
    is_zero: bool = field(default=False)

    def __call__(self, x):
        return self.eval(x)


def zero_operator() -> CocoerciveOperator:
    return CocoerciveOperator(eval=lambda x: np.zeros_like(x, dtype=float), beta=0.0, is_zero=True)


def make_quadratic_gradient(Q, b=None, seed: int = 0) -> CocoerciveOperator:
    """Gradient ``Qx - b`` of ``x'Qx/2 - b'x`` for symmetric PSD ``Q``.

    ``beta`` is a power-iteration estimate of ``lambda_max(Q)`` inflated by
    ``1e-6`` relative, so it is an upper bound in practice.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Q = 0.5 * (Q + Q.T)
    b = np.zeros(Q.shape[0]) if b is None else np.asarray(b, dtype=float)
    if not np.any(Q):
        return CocoerciveOperator(eval=lambda x: -b + 0.0 * x, beta=0.0)
    lam = operator_norm_estimate(MatrixMap(Q), seed=seed)
    return CocoerciveOperator(eval=lambda x: Q @ x - b, beta=lam * (1.0 + 1e-6))

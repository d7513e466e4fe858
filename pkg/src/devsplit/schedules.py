"""Parameter sequences (step size, relaxation, deviation ratio) and their admissibility check."""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

ZETA_UNIFORM_EPS = 1e-6


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Generator keyed by ``(seed, stream)``; independent across stream names."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode())])


class ConstantSequence:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, n: int) -> float:
        return self.value

    def __repr__(self):
        return f"const:{self.value:g}"


class UniformZeta:
    """``zeta_n`` drawn i.i.d. uniform on ``[0, high]`` from a seeded stream.

    Draws are memoized in blocks, so ``zeta(n)`` is a pure function of
    ``(seed, n)`` regardless of query order or sharing between solves.
    """

    _BLOCK = 4096

    def __init__(self, seed: int, high: float = 1.0 - ZETA_UNIFORM_EPS):
        self.seed = int(seed)
        self.high = float(high)
        self._rng = rng_for(self.seed, "zeta")
        self._values = np.empty(0)
        self._lock = threading.Lock()

    def __call__(self, n: int) -> float:
        if n >= self._values.shape[0]:
            with self._lock:
                while n >= self._values.shape[0]:
                    block = self._rng.uniform(0.0, self.high, self._BLOCK)
                    self._values = np.concatenate([self._values, block])
        return float(self._values[n])

    def __repr__(self):
        return f"uniform:{self.seed}"


def parse_zeta(text: str) -> Callable[[int], float]:
    """Parse ``zero``, ``const:<c>`` or ``uniform:<seed>``."""
    text = text.strip()
    if text == "zero":
        return ConstantSequence(0.0)
    kind, _, arg = text.partition(":")
    if kind == "const" and arg:
        return ConstantSequence(float(arg))
    if kind == "uniform" and arg:
        return UniformZeta(int(arg))
    raise ValueError(f"bad zeta policy {text!r}; expected zero, const:<c> or uniform:<seed>")


def _seq(value) -> Callable[[int], float]:
    return value if callable(value) else ConstantSequence(value)


@dataclass(frozen=True)
class Schedules:
    """``epsilon`` plus the per-iteration ``gamma_n``, ``lambda_n``, ``zeta_n``."""

    epsilon: float
    gamma: Callable[[int], float]
    lam: Callable[[int], float]
    zeta: Callable[[int], float]

    @classmethod
    def build(cls, epsilon: float, gamma, lam, zeta=0.0) -> "Schedules":
        """Scalars become constant sequences; callables are used as is."""
        return cls(float(epsilon), _seq(gamma), _seq(lam), _seq(zeta))


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    clause: str = ""
    index: int | None = None
    message: str = ""

    def __bool__(self):
        return self.ok


def epsilon_upper(beta: float) -> float:
    return min(1.0, 4.0 / (3.0 + beta))


def _values(seq: Callable[[int], float], count: int) -> np.ndarray:
    """First ``count`` terms of a sequence as an array."""
    if isinstance(seq, ConstantSequence):
        return np.full(count, seq.value)
    if isinstance(seq, UniformZeta):
        seq(count - 1)
        return seq._values[:count]
    return np.array([seq(n) for n in range(count)], dtype=float)


def _first(mask: np.ndarray) -> int | None:
    hit = np.flatnonzero(mask)
    return int(hit[0]) if hit.size else None


def validate_schedules(s: Schedules, beta: float, horizon: int) -> ValidationReport:
    """Check the parameter conditions for ``n = 0..horizon``.

    Returns a report naming the first violated clause and index instead of
    raising, so callers can print it.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    eps = s.epsilon
    hi = epsilon_upper(beta)
    if not (0.0 < eps < hi):
        return ValidationReport(False, "epsilon", None,
                                f"parameter condition (epsilon): epsilon must lie in (0, min(1, 4/(3+beta))) = "
                                f"(0, {hi:.6g}); got epsilon={eps:g}")
    N = horizon + 1
    zeta, gamma, lam = _values(s.zeta, N), _values(s.gamma, N), _values(s.lam, N)
    g_hi = (4.0 - 3.0 * eps) / beta if beta > 0 else np.inf
    l_hi = 2.0 - gamma * beta / 2.0 - eps / 2.0
    bad_i = _first(~((zeta >= 0.0) & (zeta <= 1.0 - eps)))
    bad_ii = _first(~((gamma >= eps) & (gamma <= g_hi)))
    bad_iii = _first(~((lam >= eps) & (lam <= l_hi)))
    # report the earliest index; at a tie the clauses are checked in order
    n = min(i for i in (bad_i, bad_ii, bad_iii, N) if i is not None)
    if n == N:
        return ValidationReport(True)
    if n == bad_i:
        return ValidationReport(False, "(i)", n,
                                f"parameter condition (i): 0 <= zeta_n <= 1 - epsilon = {1 - eps:.6g} "
                                f"violated at n={n} (zeta_n={zeta[n]:g})")
    if n == bad_ii:
        return ValidationReport(False, "(ii)", n,
                                f"parameter condition (ii): epsilon <= gamma_n <= (4 - 3 epsilon)/beta = {g_hi:.6g} "
                                f"violated at n={n} (gamma_n={gamma[n]:g})")
    return ValidationReport(False, "(iii)", n,
                            f"parameter condition (iii): epsilon <= lambda_n <= 2 - gamma_n beta/2 - epsilon/2 "
                            f"= {l_hi[n]:.6g} violated at n={n} (lambda_n={lam[n]:g})")
